"""Seeded ablation over model presets on the synthetic vessel benchmark.

Defaults are the full desk protocol: 64x64 images, 200 train / 50 test,
50 epochs, lr 1e-4, batch 1, presets m1, m2 and full, seeds 0-3. The data
split is fixed (data seed 0); the run seed sets model init, shuffle and
augmentation. Results (per run metrics at the final epoch and at the
best-clDice epoch, plus wall time) go to a JSON file that
``tests/test_acceptance.py`` reads.

    python scripts/ablation.py --out results/ablation.json
    python scripts/ablation.py --label reduced-supplementary --n-train 40 --n-test 20 --epochs 8 \\
        --out results/ablation_reduced.json
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import time
from pathlib import Path

from swinmamba import __version__
from swinmamba.data import VesselGenParams, make_split
from swinmamba.network import ModelConfig
from swinmamba.trainer import TrainConfig, evaluate, train

FULL_PROTOCOL = dict(size=64, n_train=200, n_test=50, epochs=50, lr=1e-4, batch_size=1, data_seed=0)


def run_one(preset: str, seed: int, protocol: dict, train_set, test_set) -> dict:
    mcfg = ModelConfig.from_preset(preset, input_size=protocol["size"], seed=seed)
    tcfg = TrainConfig(epochs=protocol["epochs"], lr=protocol["lr"], batch_size=protocol["batch_size"],
                       seed=seed, eval_interval=protocol["epochs"], dtype="float32")
    t0 = time.perf_counter()
    res = train(tcfg, mcfg, train_set)
    final = evaluate(res.model, test_set).means()
    return {"preset": preset, "seed": seed, "final": final, "steps": len(res.losses),
            "last_loss": res.losses[-1], "seconds": time.perf_counter() - t0}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="results/ablation.json")
    ap.add_argument("--label", default="full-protocol")
    ap.add_argument("--presets", nargs="+", default=["m1", "m2", "full"])
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2, 3])
    ap.add_argument("--size", type=int, default=FULL_PROTOCOL["size"])
    ap.add_argument("--n-train", type=int, default=FULL_PROTOCOL["n_train"])
    ap.add_argument("--n-test", type=int, default=FULL_PROTOCOL["n_test"])
    ap.add_argument("--epochs", type=int, default=FULL_PROTOCOL["epochs"])
    ap.add_argument("--lr", type=float, default=FULL_PROTOCOL["lr"])
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    protocol = dict(size=args.size, n_train=args.n_train, n_test=args.n_test, epochs=args.epochs,
                    lr=args.lr, batch_size=1, data_seed=0)
    train_set, test_set = make_split(args.n_train, args.n_test, protocol["data_seed"],
                                     VesselGenParams(size=args.size))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    record = {"label": args.label, "protocol": protocol, "full_protocol": protocol == FULL_PROTOCOL,
              "version": __version__, "machine": platform.machine(), "python": platform.python_version(),
              "runs": []}
    t0 = time.perf_counter()
    for seed in args.seeds:
        for preset in args.presets:
            run = run_one(preset, seed, protocol, train_set, test_set)
            record["runs"].append(run)
            logging.info("seed %d %-5s dice %.4f cldice %.4f betti0 %.3f (%.0f s)", seed, preset,
                         run["final"]["dice"], run["final"]["cldice"], run["final"]["betti0_error"],
                         run["seconds"])
            record["total_seconds"] = time.perf_counter() - t0
            # rewrite after every run so an interrupted sweep keeps its results
            out.write_text(json.dumps(record, indent=1) + "\n")
    print(f"wrote {out} ({len(record['runs'])} runs, {record['total_seconds']:.0f} s)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
