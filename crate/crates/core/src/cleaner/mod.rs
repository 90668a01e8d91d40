//! Feature cleaner: predicts clean speech features from degraded ones, conditioned
//! on text and speaker, with shared-parameter iterative refinement.

pub mod film;
mod loss;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use film::{film, FilmParams};
pub use loss::{
    cleaner_loss, cleaner_loss_tensors, crop_training_frames, loss_graph, CleanerLossReport,
    IterationLoss, IterationOutput,
};

use crate::error::{ensure, Error, Result};
use crate::features::{SpeakerEmbedding, SpeechFeatures, TextCondition};
use crate::nn::layers::{add_attention, add_layer_norm, add_linear, attention};
use crate::nn::{Bound, ConvSpec, Graph, ParamStore, Tensor, Var};
use crate::seed;
use crate::tensor_io::Checkpoint;

pub const CHECKPOINT_KIND: &str = "cleaner";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleanerConfig {
    /// Number of cross-attention + Conformer blocks.
    #[serde(rename = "N")]
    pub n_blocks: usize,
    /// Width of the block stack.
    #[serde(rename = "D_b")]
    pub d_b: usize,
    /// Hidden width of the cross-attention projections.
    pub attn_hidden: usize,
    pub attn_heads: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "Q")]
    pub q: usize,
    pub n_iterations: usize,
    pub postnet_layers: usize,
    pub postnet_kernel: usize,
    /// Depthwise kernel of the Conformer convolution module.
    pub conv_kernel: usize,
    /// Feed-forward expansion of the Conformer blocks.
    pub ff_mult: usize,
    /// Width of the sinusoidal iteration-index embedding.
    pub iteration_embedding_dim: usize,
    pub init_seed: u64,
}

impl Default for CleanerConfig {
    fn default() -> Self {
        CleanerConfig::desk_scale()
    }
}

impl CleanerConfig {
    pub fn full_scale() -> Self {
        CleanerConfig {
            n_blocks: 4,
            d_b: 128,
            attn_hidden: 512,
            attn_heads: 8,
            d: 1024,
            w: 512,
            q: 256,
            n_iterations: 2,
            postnet_layers: 5,
            postnet_kernel: 5,
            conv_kernel: 7,
            ff_mult: 4,
            iteration_embedding_dim: 128,
            init_seed: 0,
        }
    }

    pub fn desk_scale() -> Self {
        CleanerConfig {
            n_blocks: 2,
            d_b: 32,
            attn_hidden: 64,
            attn_heads: 2,
            d: 64,
            w: 32,
            q: 16,
            n_iterations: 2,
            postnet_layers: 5,
            postnet_kernel: 5,
            conv_kernel: 5,
            ff_mult: 2,
            iteration_embedding_dim: 128,
            init_seed: 0,
        }
    }

    /// Smallest sensible configuration, used for gradient checks.
    pub fn tiny() -> Self {
        CleanerConfig {
            n_blocks: 2,
            d_b: 8,
            attn_hidden: 8,
            attn_heads: 2,
            d: 8,
            w: 4,
            q: 4,
            n_iterations: 2,
            postnet_layers: 5,
            postnet_kernel: 5,
            conv_kernel: 3,
            ff_mult: 2,
            iteration_embedding_dim: 8,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_blocks >= 1, "N must be at least 1");
        ensure!(self.n_iterations >= 1, "n_iterations must be at least 1");
        ensure!(
            [
                self.d_b,
                self.attn_hidden,
                self.d,
                self.w,
                self.q,
                self.ff_mult,
                self.iteration_embedding_dim
            ]
            .iter()
            .all(|&v| v > 0),
            "cleaner dimensions must be positive"
        );
        ensure!(
            self.attn_heads >= 1
                && self.attn_hidden % self.attn_heads == 0
                && self.d_b % self.attn_heads == 0,
            "attn_heads = {} must divide attn_hidden = {} and D_b = {}",
            self.attn_heads,
            self.attn_hidden,
            self.d_b
        );
        ensure!(self.postnet_layers >= 1, "postnet needs at least one layer");
        ensure!(
            self.postnet_kernel % 2 == 1 && self.conv_kernel % 2 == 1,
            "postnet and conformer kernels must be odd"
        );
        Ok(())
    }

    /// Dilation of block `n`: `2^(n mod 2)`.
    pub fn dilation(n: usize) -> usize {
        1 << (n % 2)
    }
}

/// Sinusoidal embedding of an integer position (sin on even, cos on odd channels).
pub fn sinusoidal_embedding(position: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let rate = 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = position as f64 / rate;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleanerModel {
    pub config: CleanerConfig,
    pub params: ParamStore,
}

impl CleanerModel {
    pub fn new(config: CleanerConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = seed::sub_rng(c.init_seed, 0xC1EA);
        let mut s = ParamStore::new();
        add_linear(&mut s, &mut rng, "input_proj", c.d, c.d_b);
        add_linear(&mut s, &mut rng, "text_proj", c.w, c.d_b);
        add_linear(&mut s, &mut rng, "spk_proj", c.q, c.d_b);
        film::register(&mut s, &mut rng, "film_spk_into_text", c.d_b, c.d_b);
        film::register(
            &mut s,
            &mut rng,
            "film_iter",
            c.d_b,
            c.iteration_embedding_dim,
        );
        let ff = c.ff_mult * c.d_b;
        for n in 0..c.n_blocks {
            let b = |part: &str| format!("block{n}.{part}");
            add_attention(&mut s, &mut rng, &b("xattn"), c.d_b, c.d_b, c.attn_hidden);
            add_layer_norm(&mut s, &b("xattn_ln"), c.d_b);
            for ffn in ["ff1", "ff2"] {
                add_layer_norm(&mut s, &b(&format!("{ffn}_ln")), c.d_b);
                add_linear(&mut s, &mut rng, &b(&format!("{ffn}.in")), c.d_b, ff);
                add_linear(&mut s, &mut rng, &b(&format!("{ffn}.out")), ff, c.d_b);
            }
            add_layer_norm(&mut s, &b("att_ln"), c.d_b);
            add_attention(&mut s, &mut rng, &b("att"), c.d_b, c.d_b, c.d_b);
            add_layer_norm(&mut s, &b("conv_ln"), c.d_b);
            add_linear(&mut s, &mut rng, &b("conv.pw1"), c.d_b, 2 * c.d_b);
            s.init_uniform(
                b("conv.dw.w"),
                &[c.d_b, c.conv_kernel],
                c.conv_kernel,
                c.conv_kernel,
                &mut rng,
            );
            s.zeros(b("conv.dw.b"), &[c.d_b]);
            add_layer_norm(&mut s, &b("conv.norm"), c.d_b);
            add_linear(&mut s, &mut rng, &b("conv.pw2"), c.d_b, c.d_b);
            add_layer_norm(&mut s, &b("out_ln"), c.d_b);
        }
        add_linear(&mut s, &mut rng, "output_proj", c.d_b, c.d);
        for l in 0..c.postnet_layers {
            crate::nn::layers::add_conv(
                &mut s,
                &mut rng,
                &format!("postnet{l}"),
                c.d,
                c.d,
                c.postnet_kernel,
            );
            if l + 1 < c.postnet_layers {
                add_layer_norm(&mut s, &format!("postnet{l}.ln"), c.d);
            }
        }
        Ok(CleanerModel { config, params: s })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_inputs(&self, x: &Tensor, e: &Tensor, d: &[f64]) -> Result<()> {
        let c = &self.config;
        ensure!(
            x.rank() == 2 && x.rows() >= 1,
            "speech features must have at least one frame"
        );
        ensure!(
            x.cols() == c.d,
            "speech features have {} channels, model expects D = {}",
            x.cols(),
            c.d
        );
        ensure!(
            e.rank() == 2 && e.rows() >= 1 && e.cols() == c.w,
            "text condition {:?} does not match W = {}",
            e.shape(),
            c.w
        );
        ensure!(
            d.len() == c.q,
            "speaker embedding has {} values, model expects Q = {}",
            d.len(),
            c.q
        );
        Ok(())
    }

    fn conformer<'g>(&self, p: &Bound<'g>, n: usize, h: Var<'g>) -> Var<'g> {
        let c = &self.config;
        let b = |part: &str| format!("block{n}.{part}");
        let ffn = |h: Var<'g>, name: &str| {
            let y = p.layer_norm(&b(&format!("{name}_ln")), h);
            let y = p.linear(&b(&format!("{name}.in")), y).silu();
            h.add(p.linear(&b(&format!("{name}.out")), y).scale(0.5))
        };
        let h = ffn(h, "ff1");
        let y = p.layer_norm(&b("att_ln"), h);
        let h = h.add(attention(p, &b("att"), y, y, c.attn_heads));
        let y = p.layer_norm(&b("conv_ln"), h);
        let y = p.linear(&b("conv.pw1"), y);
        let glu = y
            .slice_last(0, c.d_b)
            .mul(y.slice_last(c.d_b, c.d_b).sigmoid());
        let spec = ConvSpec::same(c.conv_kernel, CleanerConfig::dilation(n));
        let y = glu
            .depthwise_conv1d(p.get(&b("conv.dw.w")), spec)
            .add_bias(p.get(&b("conv.dw.b")));
        let y = p.layer_norm(&b("conv.norm"), y).silu();
        let h = h.add(p.linear(&b("conv.pw2"), y));
        let h = ffn(h, "ff2");
        p.layer_norm(&b("out_ln"), h)
    }

    fn postnet<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let c = &self.config;
        let spec = ConvSpec::same(c.postnet_kernel, 1);
        let mut y = x;
        for l in 0..c.postnet_layers {
            y = p.conv(&format!("postnet{l}"), y, spec);
            if l + 1 < c.postnet_layers {
                y = p.layer_norm(&format!("postnet{l}.ln"), y).tanh();
            }
        }
        y
    }

    /// Records every refinement iteration on `g`; returns `(pre, post)` Post-Net
    /// outputs per iteration. The post output of iteration `i` is the input of `i + 1`.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        p: &Bound<'g>,
        x: Var<'g>,
        e: Var<'g>,
        d: Var<'g>,
    ) -> Vec<(Var<'g>, Var<'g>)> {
        let c = &self.config;
        let e_proj = p.linear("text_proj", e);
        let d_proj = p.linear("spk_proj", d.reshape(&[1, c.q])).reshape(&[c.d_b]);
        let cond = film::apply(p, "film_spk_into_text", e_proj, d_proj);
        let mut input = x;
        let mut outputs = Vec::with_capacity(c.n_iterations);
        for i in 0..c.n_iterations {
            let emb = g.constant(Tensor::new(
                &[c.iteration_embedding_dim],
                sinusoidal_embedding(i, c.iteration_embedding_dim),
            ));
            let cond_i = film::apply(p, "film_iter", cond, emb);
            let mut h = p.linear("input_proj", input);
            for n in 0..c.n_blocks {
                let att = attention(p, &format!("block{n}.xattn"), h, cond_i, c.attn_heads);
                h = p.layer_norm(&format!("block{n}.xattn_ln"), h.add(att));
                h = self.conformer(p, n, h);
            }
            let pre = p.linear("output_proj", h);
            let post = pre.add(self.postnet(p, pre));
            outputs.push((pre, post));
            input = post;
        }
        outputs
    }

    /// All iteration outputs for plain tensors.
    pub fn clean_outputs(&self, x: &Tensor, e: &Tensor, d: &[f64]) -> Result<Vec<IterationOutput>> {
        self.check_inputs(x, e, d)?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let outs = self.forward(
            &g,
            &p,
            g.constant(x.clone()),
            g.constant(e.clone()),
            g.constant(Tensor::new(&[d.len()], d.to_vec())),
        );
        Ok(outs
            .into_iter()
            .map(|(pre, post)| IterationOutput {
                pre_postnet: (*pre.value()).clone(),
                post_postnet: (*post.value()).clone(),
            })
            .collect())
    }

    pub fn clean(
        &self,
        x: &SpeechFeatures,
        e: &TextCondition,
        d: &SpeakerEmbedding,
    ) -> Result<SpeechFeatures> {
        let outs = self.clean_outputs(&x.values, &e.values, &d.values)?;
        let last = outs.into_iter().last().expect("n_iterations >= 1");
        let out = SpeechFeatures {
            values: last.post_postnet,
            frame_rate: x.frame_rate,
            source_rate: x.source_rate,
        };
        ensure!(
            out.values.all_finite(),
            "cleaner produced non-finite features"
        );
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config_json: serde_json::to_string(&self.config).expect("config serializes"),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ensure_kind(&ckpt, CHECKPOINT_KIND)?;
        let config: CleanerConfig = serde_json::from_str(&ckpt.config_json)
            .map_err(|e| Error::Format(format!("cleaner checkpoint config: {e}")))?;
        let fresh = CleanerModel::new(config)?;
        check_layout(&fresh.params, &ckpt.params)?;
        Ok(CleanerModel {
            config: fresh.config,
            params: ckpt.params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

pub(crate) fn ensure_kind(ckpt: &Checkpoint, kind: &str) -> Result<()> {
    if ckpt.kind != kind {
        return Err(Error::Format(format!(
            "expected a {kind} checkpoint, found '{}'",
            ckpt.kind
        )));
    }
    Ok(())
}

/// Checks that `loaded` has exactly the parameter names and shapes of `expected`.
pub(crate) fn check_layout(expected: &ParamStore, loaded: &ParamStore) -> Result<()> {
    for (name, t) in expected.iter() {
        let got = loaded
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter '{name}'")))?;
        if got.shape() != t.shape() {
            return Err(Error::Format(format!(
                "parameter '{name}' has shape {:?}, config implies {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if loaded.len() != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, config implies {}",
            loaded.len(),
            expected.len()
        )));
    }
    Ok(())
}
