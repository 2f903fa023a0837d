#!/usr/bin/env python3
"""Train the full model and each ablation on one synthetic dataset and print test metrics.

    python3 scripts/run_ablation.py --variants full no_lmp no_sf --seed 0
"""

import argparse
import dataclasses
import time

from tegaarec.data import parse_events, reindex_split, segment_weekly, split_holdout
from tegaarec.metrics import evaluate
from tegaarec.neighbours import ItemUserIndex
from tegaarec.synth import SynthSpec, generate
from tegaarec.trainer import TrainConfig, fit, popularity_baseline

VARIANTS = {
    "full": {}, "no_lmp": {"no_lmp": True}, "no_sf": {"no_sf": True}, "no_gal": {"no_gal": True},
    "with_pe": {"with_pe": True}, "no_uli": {"no_uli": True}, "no_ali": {"no_ali": True},
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    ap.add_argument("--seed", type=int, default=0, help="synthetic data seed")
    ap.add_argument("--max-epochs", type=int, default=40)
    args = ap.parse_args()

    spec = SynthSpec(num_items=200, num_clusters=5, trend_size=8, trend_weeks=10, sessions_per_user=12,
                     seed=args.seed)
    d = generate(spec)
    events, edges = parse_events(d.events_tsv, d.edges_tsv)
    split, umap, imap = reindex_split(split_holdout(segment_weekly(events, edges), spec.num_weeks // 5, 0))
    index = ItemUserIndex.build(split.train)
    base = TrainConfig(dim=32, heads=4, L_l=10, L_s=10, lr=0.005, warmup=10, max_epochs=args.max_epochs,
                       patience=5)

    pop = evaluate(split.test, popularity_baseline(split, len(imap)), split.train, index,
                   base.sampler_config(), base.eval_seed)
    print(f"{'variant':<10}{'R@10':>8}{'R@20':>8}{'N@20':>8}{'epochs':>8}{'secs':>7}")
    print(f"{'popularity':<10}{100 * pop.recall[10]:>8.2f}{100 * pop.recall[20]:>8.2f}{100 * pop.ndcg[20]:>8.2f}")
    for name in args.variants:
        t0 = time.time()
        cfg = dataclasses.replace(base, **VARIANTS[name])
        state = fit(split, cfg, n_users=len(umap), n_items=len(imap))
        res = evaluate(split.test, state.model, split.train, index, cfg.sampler_config(), cfg.eval_seed)
        print(f"{name:<10}{100 * res.recall[10]:>8.2f}{100 * res.recall[20]:>8.2f}{100 * res.ndcg[20]:>8.2f}"
              f"{state.epoch:>8}{time.time() - t0:>7.0f}", flush=True)


if __name__ == "__main__":
    main()
