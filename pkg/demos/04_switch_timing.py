"""Time switching an adapter in: dense LoRA fusion vs sparse overwrite."""

from shira.bench import bench, bench_end_to_end

rep = bench(dims=(256, 512, 1024), density=0.01, rank=64, repeats=20, seed=0)
print("single-threaded, pinned:", rep.pinned)
for r in rep.rows:
    print(f"{r.dim:5d}  fuse {r.t_fuse_mean * 1e3:7.3f} ms  scatter {r.t_scatter_mean * 1e6:7.1f} us  speedup {r.speedup}")
for w in rep.warnings:
    print("warning:", w)

# a small transformer-ish block: four square projections and an MLP pair
shapes = [(512, 512)] * 4 + [(2048, 512), (512, 2048)]
e = bench_end_to_end(shapes, density=0.01, rank=64, repeats=10)
print(f"whole block: LoRA {e.t_lora_total * 1e3:.2f} ms, sparse {e.t_shira_total * 1e3:.3f} ms, speedup {e.speedup}")
