"""Full LOSO on the synthetic corpus with a feature preset, over several seeds.

    python3 scripts/synthetic_loso.py --preset cqt-optimized --seeds 1,2,3 --epochs 50
"""
import argparse
import json
import time

from cqser.config import PRESETS, parse_seeds, preset_feature
from cqser.eval_harness import Corpus, run_loso, summarize_seeds
from cqser.nn import TrainConfig
from cqser.synthetic import make_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="cqt-optimized", choices=sorted(PRESETS))
    ap.add_argument("--seeds", default="1,2,3")
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--speakers", type=int, default=8)
    ap.add_argument("--utts", type=int, default=10)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--no-augment", action="store_true")
    args = ap.parse_args()

    manifest, audio = make_corpus(args.speakers, args.utts, seed=0)
    corpus = Corpus(manifest, audio)
    feature = preset_feature(args.preset)
    reports = []
    for seed in parse_seeds(args.seeds):
        t0 = time.perf_counter()
        res = run_loso(corpus, feature, TrainConfig(epochs=args.epochs), seed=seed,
                       augment=not args.no_augment, jobs=args.jobs)
        reports.append(res.aggregate)
        print(f"seed {seed}: {res.aggregate.table_cell()} (accuracy / UAR) "
              f"in {time.perf_counter() - t0:.0f}s", flush=True)
    print(json.dumps(summarize_seeds(reports), indent=2))


if __name__ == "__main__":
    main()
