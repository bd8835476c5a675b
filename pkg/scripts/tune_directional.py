"""Calibration harness for the 4-domain directional experiment.

Runs TEATA vs SFT over SC->CC->SC->CC toy domains for a few seeds and prints
per-domain mAP trajectories, final group averages, and domain-1 forgetting,
so generator/LR settings can be tuned before freezing the acceptance config.
"""

import argparse
import json
import shutil
import time
from pathlib import Path

from teata.config import from_dict
from teata.data import generate_synthetic_domain
from teata.lifelong import run_plan


def build_domains(root: Path, seed: int, num_ids: int, images: int,
                  noise: float = 0.05) -> list[str]:
    names = []
    for i, state in enumerate(["SC", "CC", "SC", "CC"]):
        name = f"d{i + 1}_{state.lower()}"
        generate_synthetic_domain(
            root / name,
            name=name,
            seed=seed * 97 + i,
            num_identities=num_ids,
            images_per_identity=images,
            clothing_state=state,
            num_cameras=3,
            noise_std=noise,
        )
        names.append(name)
    return names


def run_method(root, names, method, seed, args, run_dir):
    config = from_dict({
        "data": {"root": str(root), "domains": names},
        "model": {"init_std": args.init_std},
        "train": {
            "method": method,
            "seed": seed,
            "stage1_epochs": 30,
            "stage2_epochs": 20,
            "batch_size": args.batch,
            "instances_per_identity": 4,
            "stage1_lr": args.stage1_lr,
            "stage2_warmup_start": args.peak / 10,
            "stage2_peak_lr": args.peak,
            "stage2_warmup_epochs": args.warmup,
            "stage2_decay_epoch": args.decay,
            "init_mode": args.init_mode,
        },
    })
    if run_dir.exists():
        shutil.rmtree(run_dir)
    return run_plan(config, run_dir), config


def summarize(results, names):
    rows = []
    for r in results:
        rows.append({n: round(r.reports[n]["mAP"], 3) for n in names if n in r.reports})
    final = results[-1]
    sc = [final.reports[n]["mAP"] for n in names if n.endswith("sc")]
    cc = [final.reports[n]["mAP"] for n in names if n.endswith("cc")]
    diag1 = results[0].reports[names[0]]["mAP"]
    maxd1 = max(r.reports[names[0]]["mAP"] for r in results)
    forget1 = maxd1 - final.reports[names[0]]["mAP"]
    return rows, sum(sc) / len(sc), sum(cc) / len(cc), forget1, diag1


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--ids", type=int, default=12)
    ap.add_argument("--images", type=int, default=12)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--peak", type=float, default=3e-3)
    ap.add_argument("--warmup", type=int, default=5)
    ap.add_argument("--decay", type=int, default=15)
    ap.add_argument("--stage1-lr", type=float, default=5e-3)
    ap.add_argument("--init-std", type=float, default=0.35)
    ap.add_argument("--noise", type=float, default=0.05)
    ap.add_argument("--init-mode", default="KA_T")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--work", default="/tmp/tune")
    args = ap.parse_args()

    work = Path(args.work)
    t0 = time.time()
    wins_sc = wins_cc = wins_forget = 0
    for seed in args.seeds:
        droot = work / f"data_seed{seed}"
        names = build_domains(droot, seed, args.ids, args.images, args.noise)
        out = {}
        for method in ("TEATA", "SFT"):
            t1 = time.time()
            results, _ = run_method(droot, names, method, seed, args,
                                    work / f"run_{method}_{seed}")
            rows, sc, cc, forget1, diag1 = summarize(results, names)
            out[method] = (sc, cc, forget1)
            print(f"seed {seed} {method:5s} ({time.time()-t1:.0f}s): "
                  f"SC={sc:.3f} CC={cc:.3f} F(d1)={forget1:.3f} diag(d1)={diag1:.3f}")
            for t, row in enumerate(rows, 1):
                print(f"    step{t}: {json.dumps(row)}")
        wins_sc += out["TEATA"][0] > out["SFT"][0]
        wins_cc += out["TEATA"][1] > out["SFT"][1]
        wins_forget += out["TEATA"][2] < out["SFT"][2]
    print(f"\nTEATA wins: SC {wins_sc}/{len(args.seeds)}, CC {wins_cc}/{len(args.seeds)}, "
          f"forgetting {wins_forget}/{len(args.seeds)};  total {time.time()-t0:.0f}s")


if __name__ == "__main__":
    main()
