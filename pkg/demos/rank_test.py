"""When does the MRI-v1 constraint force w_spu = 0 in a linear model?

The constraint reduces to ``w_spu . M' = 0`` where ``M'`` holds the
centred spurious-feature moments of each training environment. It pins
w_spu to zero exactly when M' has full row rank, which needs more
environments than spurious dimensions.

Run:  python3 demos/rank_test.py
"""

from ivlab import oracle
from ivlab.envgen import preset_suite

print("random environments, 1000 draws each")
print("  d_spu  n_envs  forced")
for d in (1, 2, 3, 5):
    for e in (d, d + 1, d + 3):
        out = oracle.theorem1_trials(d, e, 1000, seed=d * 10 + e)
        print(f"  {d:5d}  {e:6d}  {out['forced']:4d}/1000")

print("\npreset suites")
for name in ("st-reg", "st-class", "toy-cmnista", "toy-cmnistb"):
    mm = oracle.MomentMatrix.from_suite(preset_suite(name))
    r = oracle.theorem1_check(mm)
    print(f"  {name:12s} moments {mm.M.ravel().round(4).tolist()}  rank {r.rank}  forced {r.invariance_forced}")

# two environments sharing the same spurious correlation give no signal
print("\nidentical environments:", oracle.theorem1_check([[0.8, 0.8]]).to_dict())
