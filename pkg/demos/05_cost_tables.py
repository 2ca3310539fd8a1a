"""
Operation counts, FLOPs and memory
==================================

The analytic cost model at the published operating point, in the printed
accounting and in strict accounting, then a desk-scale timing run.
"""
import numpy as np

from onlinesar import bench
from onlinesar.sarcore import RadarParams

for name, value in bench.published_point_summary().items():
    print(f"{name:26s} {value:,}")

rows = bench.cost_table(**bench.PUBLISHED_POINT)
print(bench.format_table(rows, ["method", "mode", "complexity", "gflops_per_row", "gflops_per_scan", "memory"]))

# measured per-row latency at desk scale, single core
p = RadarParams.desk()
rng = np.random.default_rng(0)
pulses = (rng.standard_normal((200, 1024)) + 1j * rng.standard_normal((200, 1024))).astype(np.complex64)
for method in bench.Method:
    m = bench.measure(lambda: bench.make_processor(method, p, 1024), pulses, track_memory=False)
    print(f"{method.value:9s} median {m.per_row_ms_median:7.3f} ms/row  full {m.full_ms:8.1f} ms")
