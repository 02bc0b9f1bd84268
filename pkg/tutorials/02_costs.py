"""Parameter and FLOP accounting for the default and optimized networks."""
from uxnet3d import analysis
from uxnet3d.model import UXNetConfig, build

default = UXNetConfig()
optimized = UXNetConfig.optimized()

for name, cfg in [("default", default), ("optimized", optimized)]:
    print(f"== {name}")
    print(analysis.count_flops(cfg).summary())

# the analytic plan agrees with an instantiated model; a tiny one keeps this quick
tiny = UXNetConfig.tiny()
assert analysis.count_params(build(tiny)).total_params == analysis.count_params(tiny).total_params

# kernel sweep: only the block depthwise convs change, so params grow with k^3
rows = analysis.ablation_rows(analysis.kernel_sweep(default))
print(analysis.render_rows(rows, "markdown"))
prev = None
for r in rows:
    if prev:
        print(f"{prev['name']} -> {r['name']}: +{r['params'] - prev['params']:,}")
    prev = r

# swapping one piece of the block at a time
for mode in [dict(conv_mode="STANDARD"), dict(scaling_mode="MLP"), dict(scaling_mode="NONE")]:
    cfg = UXNetConfig(**mode)
    diff = analysis.count_params(cfg).total_params - analysis.count_params(default).total_params
    print(mode, f"{diff:+,}")

# receptive field along the encoder
for e in analysis.receptive_field(UXNetConfig())[:4]:
    print(f"{e.layer:<32} k={e.kernel} s={e.stride} rf={e.rf} jump={e.jump}")
