# %% [markdown]
# Choosing the number of experts
#
# Scenario II puts clusters 1-15, 16-30 and 31-50 on three different lines, so
# three experts are needed. The sweep fits K = 1..5 and scores each fit by AIC
# and BIC, computed from Monte Carlo marginal likelihoods.

# %%
from latmix import selection
from latmix import simulate as sim
from latmix.core import McemConfig

dataset, _ = sim.generate(sim.ScenarioSpec("II", seed=3), replication=0)
fits = selection.sweep(dataset, selection.SelectConfig(K_range=range(1, 6)),
                       mcem_config=McemConfig(seed=3))

# %%
print(" K   params      AIC        BIC    iterations")
for K, f in fits.items():
    print(f"{K:2d}   {f.n_params:5d}  {f.aic:9.1f}  {f.bic:9.1f}   {f.iterations}")
print("BIC picks K =", selection.choose(fits, "bic").K)
print("AIC picks K =", selection.choose(fits, "aic").K)

# %% [markdown]
# With K = 3 each block's clusters put almost all their weight on one expert.

# %%
best = fits[3]
for block, cid in (("1-15", "c001"), ("16-30", "c020"), ("31-50", "c040")):
    print(block, cid, best.pi_hat[dataset.index(cid)].round(3))
