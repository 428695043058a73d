"""Quick pass over the numerical identities with their acceptance tolerances."""
from __future__ import annotations

from . import identities as I


def run_selfcheck(emit=print) -> bool:
    checks = []
    prim = I.primitive_errors()
    checks.append(("primitive JVP/grad vs finite differences", max(prim.values()), "<", 1e-6))
    mlp = I.mlp_errors(trials=2)
    checks.append(("3-layer net JVP vs finite differences", mlp["jvp"], "<", 1e-6))
    checks.append(("3-layer net gradient vs finite differences", mlp["grad"], "<", 1e-6))
    checks.append(("forward/reverse duality", mlp["duality"], "<", 1e-8))
    checks.append(("tangent decomposition", I.tangent_identity_error(), "<", 1e-8))
    checks.append(("rearranged vs naive JVP", I.rearrangement_error(), "<", 1e-10))
    checks.append(("gradient conversion", I.grad_conversion_error(), "<", 1e-8))
    sl = I.sampler_slopes()
    checks.append(("DDIM order", abs(sl["ddim"] - 1.0), "<", 0.1))
    checks.append(("DPM-Solver-2 order", abs(sl["dpm2"] - 2.0), "<", 0.15))
    checks.append(("DPM-Solver++-2 order", abs(sl["dpmpp2"] - 2.0), "<", 0.15))
    se = I.schedule_equivalence_errors()
    checks.append(("schedule equivalence", max(se.values()), "<", 1e-12))
    at = I.attention_errors()
    checks.append(("streaming vs dense attention JVP", at["stream_vs_dense"], "<", 1e-10))
    checks.append(("dense attention JVP vs autodiff", at["dense_vs_autodiff"], "<", 1e-12))
    ok = True
    for name, val, _, tol in checks:
        passed = val < tol
        ok &= passed
        emit(f"{'PASS' if passed else 'FAIL'}  {name}: {val:.3g} (< {tol:g})")
    return ok
