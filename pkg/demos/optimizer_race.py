"""Compare iterations to early stopping for AMSGrad, Adam and RMSProp on simulated panels.

Run with ``python3 demos/optimizer_race.py``; takes about a minute.
"""

from gplmprof.sim import METRICS, SimScenario, run_model_comparison, run_optimizer_comparison

scenario = SimScenario(m=100, mean_size=50, rho=0.5, truth="nonlinear", replicates=3)

cmp = run_optimizer_comparison(scenario, fits_per_panel=2)
for (alg, sampling), iters in cmp.iterations.items():
    auc = cmp.metrics[(alg, sampling)].mean["auc"]
    print(f"{alg:8s} mean iterations {sum(iters) / len(iters):7.1f}  ratio to amsgrad "
          f"{cmp.speedup(alg, sampling):5.2f}  AUC {auc:.3f}")

reports = run_model_comparison(scenario)
for name, rep in reports.items():
    print(name, " ".join(f"{k}={rep.mean[k]:.3f}" for k in METRICS))
