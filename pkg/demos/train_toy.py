"""Train a small transition model on the 8-Gaussian mixture and sample it.

A shortened version of the flagship run (a few thousand iterations instead of
20k) so it finishes in about a minute on one core.  After training it draws
the same initial noise through 1, 4 and 16 steps and reports the energy
distance to fresh data for each, then writes scatter images next to this
file.

Run:  python demos/train_toy.py [iterations]
"""

import sys
import time
from pathlib import Path

import numpy as np

from anystep import config as cfgmod
from anystep import sampler
from anystep.cli import write_ppm
from anystep.data import denormalize, draw_batch
from anystep.oracle import energy_distance
from anystep.trainer import Trainer, run


def main(iterations=3000):
    cfg = cfgmod.defaults()
    cfgmod.set_value(cfg, "trainer.iterations", str(iterations))
    cfgmod.set_value(cfg, "trainer.batch_size", "128")
    cfgmod.set_value(cfg, "trainer.lr", "1e-3")
    cfgmod.set_value(cfg, "trainer.ema_decay", "0.995")
    cfgmod.set_value(cfg, "trainer.cosine_loss_scale", "1.0")
    cfgmod.set_value(cfg, "trainer.probe_every", "0")
    cfgmod.validate(cfg)

    spec = cfgmod.build_transport(cfg)
    ds = cfgmod.build_dataset(cfg).fit()
    net_cfg, train_cfg = cfgmod.build_network(cfg, ds), cfgmod.build_train(cfg)
    tr = Trainer(spec, train_cfg, net_cfg, ds)

    start = time.perf_counter()
    report = run(spec, train_cfg, net_cfg, ds, trainer=tr)
    print(f"{iterations} iterations in {time.perf_counter() - start:.0f}s, "
          f"final loss {np.mean(report.losses[-100:]):.4f}")
    for name, values in report.interval_losses.items():
        recent = np.array(values[-200:])
        if np.isfinite(recent).any():
            print(f"  mean loss on {name:6s} intervals: {np.nanmean(recent):.4f}")
        else:
            print(f"  no {name} intervals in the last {len(recent)} batches")

    ref, _ = draw_batch(ds, 2000, np.random.default_rng(123))
    model = sampler.network_model(tr.ema, net_cfg, spec)
    out_dir = Path(__file__).resolve().parent
    for steps in (1, 4, 16):
        x = sampler.sample(model, spec, sampler.build_schedule(spec, steps), 2000, rng=np.random.default_rng(7))
        print(f"{steps:2d} step(s): energy distance {energy_distance(x, ref):.4f}")
        write_ppm(out_dir / f"toy_{steps}step.ppm", denormalize(x, ds), lim=3.0)
    print(f"scatter images written to {out_dir}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 3000)
