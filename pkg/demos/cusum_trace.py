"""Print the CUSUM statistic and the temporal-prior weight around the change.

    python3 demos/cusum_trace.py [seed]

Shows how an alarm lowers lambda2 so the per-step estimate can move, and how
the edge tests then confirm (or reject) the proposed changes.
"""

import sys

from dyncausal import SimConfig, generate_stream, run_sequential
from dyncausal.harness import default_solver_config


def main(seed=0):
    cfg = SimConfig(n=20, mode="lagged", T=320, seed=seed)
    batches, truth = generate_stream(cfg)
    print("true flips:", [(f.parent, f.child, f.kind) for f in truth.flipped])
    solver = default_solver_config().replace(edge_threshold=cfg.edge_threshold)
    events, diag = run_sequential(batches, solver, mode=cfg.mode, horizon=cfg.t_star - 150 + 1,
                                  seed=cfg.seed)
    print(f"c={diag.c:.4g} eta={diag.eta:.4g}")
    by_t = {}
    for e in events:
        by_t.setdefault(e.t, []).append(f"{e.kind} {e.parent}->{e.child}")
    print("   t     score        S  alarm  lambda2  events")
    for t, score, S, alarm, l2 in zip(diag.t, diag.score, diag.S, diag.alarm, diag.lambda2):
        if t >= cfg.t_star - 5 and (t <= cfg.t_star + 60 or t in by_t):
            print(f"{t:4d}  {score:8.4g}  {S:7.3g}  {'*' if alarm else ' ':>5}  {l2:7.3g}  "
                  + "; ".join(by_t.get(t, [])))


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
