"""Longest context per layout, and what it costs to get there."""

from __future__ import annotations

from dpswitch import LLAMA_70B, CostModel, DeploymentConfig, max_context

cfg = DeploymentConfig()
cost = CostModel()
for p in (2, 4, 8):
    n = max_context(LLAMA_70B, cfg, p)
    print(f"{cfg.num_engines // p}DPx{p}TP  {n:>9,d} tokens  cold start {cost.cold_start_presets[p] / 1e3:.0f} s")
dyn = max_context(LLAMA_70B, cfg, 8, dynamic_mode=True)
print(f"dynamic   {dyn:>9,d} tokens  live switch {cost.switch_latency_ms:.0f} ms")
