"""Train a learned-adapter model and its zero-adapter twin, then sample both.

Both runs share the seed, so the denoiser starts from the same weights and sees
the same minibatches. The only difference is whether the forward process is
shifted by the learned context term. Per-class sample means are printed for
DDPM and for deterministic DDIM at stride 10, and scatter plots are written
as SVG files into ``out_dir``.

    python demos/train_and_sample.py [steps] [out_dir]
"""
import pathlib
import sys

import numpy as np

from ctxdiff.data import default_means, generate, scatter_svg
from ctxdiff.reverse import SamplerConfig, sample_chain
from ctxdiff.training import TrainConfig, train


def main():
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
    out = pathlib.Path(sys.argv[2] if len(sys.argv) > 2 else "demo_out")
    out.mkdir(parents=True, exist_ok=True)
    data = generate({"generator": "toy-gaussian", "n": 10_000, "sigma": 0.5, "seed": 0})
    c = np.repeat([0, 1], 1000)
    for variant in ("learned", "zero"):
        cfg = TrainConfig(adapter={"variant": variant}, steps=steps, seed=0)
        state, metrics = train(cfg, data.x0, data.classes, data.n_classes)
        tail = np.mean([m["loss"] for m in metrics[-200:]])
        print(f"{variant:8s} final loss {tail:.4f}")
        model = state.model
        for mode, sampler in (("ddpm", SamplerConfig("ddpm")), ("ddim", SamplerConfig("ddim", stride=10))):
            x = sample_chain(len(c), c, model.denoiser, model.adapter, model.schedule, sampler)
            means = np.stack([x[c == k].mean(axis=0) for k in range(2)])
            err = np.linalg.norm(means - default_means(2), axis=1).max()
            print(f"  {mode}: class means {np.round(means, 3).tolist()}  max error {err:.3f}")
            (out / f"{variant}_{mode}.svg").write_text(scatter_svg(x, c))
    print(f"plots written to {out}/")


if __name__ == "__main__":
    main()
