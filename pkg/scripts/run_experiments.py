#!/usr/bin/env python3
"""Run the oracle experiments and print one JSON record per experiment.

    python3 scripts/run_experiments.py                 # everything (~12 min)
    python3 scripts/run_experiments.py posterior step_size
    python3 scripts/run_experiments.py --out results.json collapse
"""

import argparse
import json
import time

from shortrun import experiments as E

RUNNERS = {
    "posterior": E.run_posterior_sampling,
    "density": E.run_density_tracker,
    "marginal": E.run_marginal_likelihood,
    "recovery": E.run_recovery,
    "step_size": E.run_step_size,
}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("names", nargs="*", help=f"subset of {sorted(RUNNERS) + ['collapse', 'probes']}")
    p.add_argument("--out", help="also write all records to this JSON file")
    args = p.parse_args()
    names = args.names or [*RUNNERS, "collapse", "probes"]
    unknown = set(names) - set(RUNNERS) - {"collapse", "probes"}
    if unknown:
        p.error(f"unknown experiments: {sorted(unknown)}")

    records = {}
    collapse = None
    for name in names:
        t0 = time.perf_counter()
        if name in RUNNERS:
            result = RUNNERS[name]()
        else:
            if collapse is None:
                collapse = E.run_collapse()
            if name == "collapse":
                result = E.public(collapse)
            else:
                result = E.run_probes(collapse["_model"], collapse["_data"], collapse["_vocab"])
        result = {"seconds": round(time.perf_counter() - t0, 1), **result}
        records[name] = result
        print(json.dumps({name: result}), flush=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(records, f, indent=2)


if __name__ == "__main__":
    main()
