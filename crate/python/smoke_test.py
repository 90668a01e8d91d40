"""Smoke test for the pymiipher extension.

Build the module and put it on the path, e.g.

    cargo build --release -p miipher-py --features extension-module
    cp target/release/libpymiipher.so python/pymiipher.so
    python3 python/smoke_test.py
"""

import json
import math
import os
import sys
import tempfile

import pymiipher


def tone(freq, seconds, rate, amp=0.3):
    n = int(seconds * rate)
    return [amp * math.sin(2 * math.pi * freq * i / rate) for i in range(n)]


def main():
    clean = tone(220.0, 1.0, 24000)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "tone.wav")
        pymiipher.save_wav(path, clean, 24000)
        back, rate = pymiipher.load_wav(path)
        assert rate == 24000 and len(back) == len(clean)
        assert max(abs(a - b) for a, b in zip(clean, back)) <= 2.0 ** -15

        down = pymiipher.resample(clean, 24000, 16000)
        assert len(down) == 16000

        recipe = json.loads(pymiipher.sample_recipe(3, "reverb+codec"))
        noise = tone(1234.0, 0.5, 24000, amp=0.1)
        degraded = pymiipher.degrade(clean, 24000, noise, 24000, json.dumps(recipe))
        assert len(degraded) == len(clean)
        assert all(math.isfinite(v) for v in degraded)

        peak = max(abs(v) for v in pymiipher.gain_normalize(degraded))
        assert abs(peak - 0.9) < 1e-12

        fx = pymiipher.Extractor(d=8, w=4, q=4)
        feats = fx.speech_features(clean, 24000)
        assert len(feats) == (1 + 16000 // 160) // 4 and len(feats[0]) == 8
        assert len(fx.text_condition("hello")) == 5
        emb = fx.speaker_embedding(clean, 24000)
        assert abs(pymiipher.cosine_similarity(emb, emb) - 1.0) < 1e-12

        loss = pymiipher.cleaner_loss(feats, [(feats, feats)])
        assert loss["total"] == 0.0

        try:
            pymiipher.gain_normalize([])
        except ValueError:
            pass
        else:
            raise AssertionError("empty input should raise ValueError")
        try:
            pymiipher.load_wav(os.path.join(tmp, "missing.wav"))
        except OSError:
            pass
        else:
            raise AssertionError("missing file should raise OSError")

        # Train tiny models through the command line, then restore in-process.
        cfg = os.path.join(tmp, "tiny.toml")
        with open(cfg, "w") as f:
            f.write(
                "[extractor]\nD = 8\nW = 4\nQ = 4\n"
                "[cleaner]\nD = 8\nW = 4\nQ = 4\nD_b = 8\nattn_hidden = 8\n"
                "[vocoder]\nD = 8\nQ = 4\ncond_channels = 6\nfilter_channels = 6\nfilter_kernel = 15\n"
            )
        fixtures = os.path.join(tmp, "fixtures")
        corpus = os.path.join(tmp, "corpus")
        steps = [
            ["make-fixtures", "--out", fixtures],
            ["degrade-corpus", "--manifest", os.path.join(fixtures, "clean.jsonl"),
             "--noise", os.path.join(fixtures, "noise.jsonl"), "--out", corpus],
            ["train-cleaner", "--paired", os.path.join(corpus, "paired.jsonl"),
             "--out", os.path.join(tmp, "c"), "--steps", "2"],
            ["train-vocoder", "--paired", os.path.join(corpus, "paired.jsonl"),
             "--out", os.path.join(tmp, "v"), "--steps", "2"],
        ]
        for argv in steps:
            code = pymiipher.run_cli(["--config", cfg] + argv)
            assert code == 0, (argv, code)

        restorer = pymiipher.Restorer(os.path.join(tmp, "c", "cleaner.ckpt"), os.path.join(tmp, "v", "vocoder.ckpt"))
        y, rate = restorer.restore(degraded, 24000, "a test tone", fx, seed=1)
        assert rate == 24000 and len(y) == len(feats) * 960
        assert all(math.isfinite(v) for v in y)

    print("pymiipher smoke test passed")


if __name__ == "__main__":
    sys.exit(main())
