use rand::Rng;

use crate::error::{ensure, Result};
use crate::nn::layers::add_conv;
use crate::nn::{Bound, ConvSpec, Graph, ParamStore, Tensor, Var};

pub const FILM_KERNEL: usize = 3;
pub const FILM_LRELU_SLOPE: f64 = 0.1;

/// Convolutional FiLM layer: `film(A, b) = conv2(lrelu(conv1(A)) + b)`.
///
/// `conv1` maps the `D` channels of `A [K × D]` to the `Q` channels of `b`, `conv2`
/// maps them back to `D`. Both are kernel 3, stride 1, zero "same" padding, with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmParams {
    /// `[Q, D, 3]`
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    /// `[D, Q, 3]`
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub lrelu_slope: f64,
}

impl FilmParams {
    pub fn random(d: usize, q: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        register(&mut store, rng, "film", d, q);
        Self::from_store(&store, "film").expect("freshly registered")
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Result<Self> {
        let get = |suffix: &str| {
            store
                .get(&format!("{name}.{suffix}"))
                .cloned()
                .ok_or_else(|| {
                    crate::Error::Validation(format!("missing FiLM parameter {name}.{suffix}"))
                })
        };
        let p = FilmParams {
            conv1_w: get("conv1.w")?,
            conv1_b: get("conv1.b")?,
            conv2_w: get("conv2.w")?,
            conv2_b: get("conv2.b")?,
            lrelu_slope: FILM_LRELU_SLOPE,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn insert_into(&self, store: &mut ParamStore, name: &str) {
        store.insert(format!("{name}.conv1.w"), self.conv1_w.clone());
        store.insert(format!("{name}.conv1.b"), self.conv1_b.clone());
        store.insert(format!("{name}.conv2.w"), self.conv2_w.clone());
        store.insert(format!("{name}.conv2.b"), self.conv2_b.clone());
    }

    /// Feature width `D` of the modulated input.
    pub fn dim(&self) -> usize {
        self.conv1_w.shape()[1]
    }

    /// Width `Q` of the conditioning vector.
    pub fn cond_dim(&self) -> usize {
        self.conv1_w.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let (d, q) = (self.dim(), self.cond_dim());
        ensure!(
            self.conv1_w.shape() == [q, d, FILM_KERNEL]
                && self.conv2_w.shape() == [d, q, FILM_KERNEL],
            "FiLM kernels must be 3 wide, got {:?} and {:?}",
            self.conv1_w.shape(),
            self.conv2_w.shape()
        );
        ensure!(
            self.conv1_b.shape() == [q] && self.conv2_b.shape() == [d],
            "FiLM bias shapes {:?} / {:?} do not match",
            self.conv1_b.shape(),
            self.conv2_b.shape()
        );
        Ok(())
    }
}

/// Registers the parameters of a FiLM layer under `name`.
pub fn register(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, q: usize) {
    add_conv(store, rng, &format!("{name}.conv1"), d, q, FILM_KERNEL);
    add_conv(store, rng, &format!("{name}.conv2"), q, d, FILM_KERNEL);
}

/// Graph form of the FiLM layer; `a [K, D]` (or `[B, K, D]`), `b [Q]`.
pub fn apply<'g>(p: &Bound<'g>, name: &str, a: Var<'g>, b: Var<'g>) -> Var<'g> {
    let spec = ConvSpec::same(FILM_KERNEL, 1);
    let h = p
        .conv(&format!("{name}.conv1"), a, spec)
        .leaky_relu(FILM_LRELU_SLOPE);
    p.conv(&format!("{name}.conv2"), h.add_bias(b), spec)
}

/// Evaluates `film(A, b)` for plain tensors.
pub fn film(a: &Tensor, b: &[f64], params: &FilmParams) -> Result<Tensor> {
    params.validate()?;
    ensure!(
        a.rank() == 2 && a.cols() == params.dim(),
        "FiLM input {:?} does not have {} channels",
        a.shape(),
        params.dim()
    );
    ensure!(a.rows() >= 1, "FiLM input has no frames");
    ensure!(
        b.len() == params.cond_dim(),
        "conditioning vector of {} for a {}-wide FiLM",
        b.len(),
        params.cond_dim()
    );
    let mut store = ParamStore::new();
    params.insert_into(&mut store, "film");
    let g = Graph::new();
    let bound = store.bind(&g, false);
    let out = apply(
        &bound,
        "film",
        g.constant(a.clone()),
        g.constant(Tensor::new(&[b.len()], b.to_vec())),
    );
    Ok((*out.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    /// Direct evaluation of the FiLM formula with explicit loops.
    fn reference(a: &Tensor, b: &[f64], p: &FilmParams) -> Tensor {
        let conv = |x: &Vec<Vec<f64>>, w: &Tensor, bias: &Tensor| -> Vec<Vec<f64>> {
            let (co, ci, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
            let t = x.len();
            (0..t)
                .map(|i| {
                    (0..co)
                        .map(|o| {
                            let mut s = bias.data()[o];
                            for j in 0..k {
                                let src = i as isize + j as isize - 1;
                                if src < 0 || src >= t as isize {
                                    continue;
                                }
                                for c in 0..ci {
                                    s += w.data()[(o * ci + c) * k + j] * x[src as usize][c];
                                }
                            }
                            s
                        })
                        .collect()
                })
                .collect()
        };
        let rows: Vec<Vec<f64>> = (0..a.rows()).map(|i| a.row(i).to_vec()).collect();
        let h: Vec<Vec<f64>> = conv(&rows, &p.conv1_w, &p.conv1_b)
            .into_iter()
            .map(|r| {
                r.iter()
                    .zip(b)
                    .map(|(&v, &bb)| if v > 0.0 { v + bb } else { 0.1 * v + bb })
                    .collect()
            })
            .collect();
        Tensor::from_rows(&conv(&h, &p.conv2_w, &p.conv2_b))
    }

    #[test]
    fn matches_direct_formula() {
        let mut rng = seed::rng(5);
        let mut p = FilmParams::random(4, 3, &mut rng);
        p.conv1_b = Tensor::randn(&[3], 0.5, &mut rng);
        p.conv2_b = Tensor::randn(&[4], 0.5, &mut rng);
        let a = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let b = [0.3, -1.0, 2.0];
        let got = film(&a, &b, &p).unwrap();
        let want = reference(&a, &b, &p);
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_final_map_gives_zeros() {
        let mut rng = seed::rng(6);
        let mut p = FilmParams::random(5, 2, &mut rng);
        p.conv2_w = Tensor::zeros(&[5, 2, 3]);
        let out = film(&Tensor::randn(&[7, 5], 3.0, &mut rng), &[4.0, -2.0], &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conditioning_vector_matters() {
        let mut rng = seed::rng(7);
        let p = FilmParams::random(4, 3, &mut rng);
        let a = Tensor::randn(&[5, 4], 1.0, &mut rng);
        assert_ne!(
            film(&a, &[0.0; 3], &p).unwrap(),
            film(&a, &[1.0; 3], &p).unwrap()
        );
    }

    #[test]
    fn shape_errors() {
        let mut rng = seed::rng(8);
        let p = FilmParams::random(4, 3, &mut rng);
        assert!(film(&Tensor::zeros(&[5, 3]), &[0.0; 3], &p).is_err());
        assert!(film(&Tensor::zeros(&[5, 4]), &[0.0; 2], &p).is_err());
        let mut bad = p.clone();
        bad.conv1_w = Tensor::zeros(&[3, 4, 5]);
        assert!(bad.validate().is_err());
    }
}
