"""Run the bundled case study end to end: fit, inspect, predict.

Writes everything under case_study/out/ and prints the headline numbers.
Pass --freeze-reference to (re)write case_study/reference.json from this
run's final training NLL; do that only after re-verifying the fit
against the test-suite oracles.
"""

import argparse
import json
import os
import sys
import time

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, os.path.join(ROOT, "src"))

from sddr.cli import main as sddr_main  # noqa: E402


def run(argv) -> None:
    code = sddr_main(argv)
    if code != 0:
        raise SystemExit(f"command {argv[0]!r} failed with exit code {code}")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--freeze-reference", action="store_true")
    args = parser.parse_args()

    os.chdir(ROOT)
    config = "case_study/config.json"
    out = "case_study/out"

    t0 = time.time()
    run(["fit", "--config", config, "--out", out])
    fit_secs = time.time() - t0
    with open(os.path.join(out, "summary.json")) as fh:
        summary = json.load(fh)
    print(f"fit: {fit_secs:.1f}s  final_loss={summary['final_loss']:.6f}  "
          f"final_nll={summary['final_nll']:.10f}")

    inspect_cfg = {"inspect": {"model": os.path.join(out, "model.json")}}
    ic_path = os.path.join(out, "inspect_config.json")
    with open(ic_path, "w") as fh:
        json.dump(inspect_cfg, fh, indent=2)
    run(["inspect", "--config", ic_path, "--out", out])

    predict_cfg = {
        "data": {"csv_path": "case_study/train.csv", "response": "y"},
        "formulas": json.load(open(config))["formulas"],
        "networks": json.load(open(config))["networks"],
        "predict": {"model": os.path.join(out, "model.json"),
                    "statistic": "quantile", "probs": [0.1, 0.5, 0.9]},
    }
    pc_path = os.path.join(out, "predict_config.json")
    with open(pc_path, "w") as fh:
        json.dump(predict_cfg, fh, indent=2)
    run(["predict", "--config", pc_path, "--out", out])
    print(f"artifacts in {out}/")

    if args.freeze_reference:
        ref_path = "case_study/reference.json"
        with open(ref_path, "w") as fh:
            json.dump({"final_nll": summary["final_nll"]}, fh, indent=2)
            fh.write("\n")
        print(f"froze {ref_path}: final_nll={summary['final_nll']!r}")


if __name__ == "__main__":
    main()
