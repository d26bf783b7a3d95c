"""Per-decision plan+act latency as the recursion depth grows.

Weights are random; only shapes matter for timing.

    python demos/03_latency.py
"""
from rsp.analysis import latency_by_depth

for s in latency_by_depth((1, 2, 3, 4), k=8, hidden=(1024, 1024), decisions=2000, warmup=200):
    print(f"N={s.depth}: mean {s.mean_us:7.1f} us   p50 {s.p50_us:7.1f} us   p95 {s.p95_us:7.1f} us")
