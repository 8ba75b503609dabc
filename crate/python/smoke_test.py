#!/usr/bin/env python3
"""Smoke test for the diffsr Python extension.

Finds the compiled cdylib under target/, exposes it as an importable
module, and exercises the main surface: schedules, forward diffusion,
metrics, the toy dataset, a tiny training run, and sampling.

Build the library first:  cargo build --release -p diffsr-python
Then run:                 python3 python/smoke_test.py
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_diffsr():
    candidates = [
        REPO / "target" / "release" / "libdiffsr.so",
        REPO / "target" / "debug" / "libdiffsr.so",
        REPO / "target" / "release" / "libdiffsr.dylib",
        REPO / "target" / "debug" / "libdiffsr.dylib",
    ]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        sys.exit("no compiled library found; run: cargo build --release -p diffsr-python")
    stage = Path(tempfile.mkdtemp(prefix="diffsr-py-"))
    shutil.copy2(built, stage / "diffsr.so")
    sys.path.insert(0, str(stage))
    import diffsr

    return diffsr


def main():
    diffsr = import_diffsr()
    np = __import__("numpy")

    # Schedule: the noise scale halfway through the inference schedule sits
    # at about a quarter, and the threshold lookup inverts it.
    sched = diffsr.Schedule.linear(1e-5, 0.213, 100)
    assert len(sched) == 100
    scale50 = sched.sqrt_alpha_bar(50)
    assert 0.24 <= scale50 <= 0.27, scale50
    assert sched.cutoff_step_for_threshold(0.25) == 50
    assert sched.alpha_bar(0) == 1.0
    assert sched.posterior_var(1) == 0.0
    print(f"ok schedule (sqrt_alpha_bar(50) = {scale50:.6f})")

    # Forward diffusion matches the closed form computed in numpy.
    rng = np.random.default_rng(0)
    x0 = rng.random((1, 12, 12))
    noise = rng.standard_normal((1, 12, 12))
    s = sched.sqrt_alpha_bar(30)
    latent = diffsr.diffuse(x0, s, noise)
    expected = s * x0 + math.sqrt(1.0 - s * s) * noise
    assert np.allclose(latent, expected, atol=1e-12)
    print("ok diffuse (matches closed form)")

    # Metrics: identity cases and a known ordering.
    a = rng.random((1, 16, 16))
    b = np.clip(a + 0.1 * rng.standard_normal((1, 16, 16)), 0.0, 1.0)
    assert diffsr.psnr(a, a) == 99.0  # capped identical-image value
    assert diffsr.psnr(a, b) < 99.0
    assert abs(diffsr.ssim(a, a) - 1.0) < 1e-12
    assert diffsr.ssim(a, b) < 1.0
    print("ok metrics (psnr, ssim)")

    # Toy data: deterministic in the seed, correctly shaped, resampling ties
    # the three arrays together.
    pairs = diffsr.toy_pairs(3, 16, factor=2, seed=42)
    again = diffsr.toy_pairs(3, 16, factor=2, seed=42)
    assert len(pairs) == 3
    p = pairs[0]
    assert p.hr.shape == (1, 16, 16)
    assert p.lr.shape == (1, 8, 8)
    assert p.lr_up.shape == (1, 16, 16)
    assert p.factor == 2
    assert np.array_equal(p.hr, again[0].hr)
    assert np.allclose(p.lr_up, diffsr.upsample_bicubic(p.lr, 2))
    assert np.allclose(p.lr, diffsr.downsample_bicubic(p.hr, 2))
    assert diffsr.consistency(p.hr, p.lr, 2) < 1e-12
    print("ok toy dataset (deterministic, consistent resampling)")

    # Tiny end-to-end: train three steps, reload the checkpoint, sample.
    out = Path(tempfile.mkdtemp(prefix="diffsr-train-")) / "model.pdif"
    losses = diffsr.train(
        "\n".join(
            [
                "train_schedule = linear(5e-5,0.01,2000)",
                "infer_schedule = linear(1e-5,0.213,100)",
                "data = toy(4,16)",
                "total_steps = 3",
                "batch_size = 2",
                "base_channels = 8",
                "channel_multipliers = 1,2",
                "residual_blocks = 1",
                "group_channels = 4",
                "seed = 7",
            ]
        ),
        out,
    )
    assert len(losses) == 3 and all(math.isfinite(l) for l in losses)
    model = diffsr.Model.load(out)
    assert model.upsample_factor == 2
    assert "base_channels = 8" in model.config_text

    sr = model.sample(pairs[0].lr, cutoff=5, seed=1)
    assert sr.shape == (1, 16, 16)
    assert float(sr.min()) >= 0.0 and float(sr.max()) <= 1.0
    sr_again = model.sample(pairs[0].lr, cutoff=5, seed=1)
    assert np.array_equal(sr, sr_again), "sampling must be deterministic per seed"
    print(f"ok train + load + sample (losses {losses[0]:.3f} -> {losses[-1]:.3f})")

    print("smoke test passed")


if __name__ == "__main__":
    main()
