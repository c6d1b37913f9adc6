"""Why repeated access loops beat long single passes under random replacement.

Runs the N=16..24, A=1..4, D=1..6 strategy grid on the alcatel-pop2 profile and compares the best
pattern against single passes over the same and larger eviction sets.
"""
from armcache.cachesim import load_profile, toy_profile
from armcache.eviction import EvictionStrategy, evaluate, parse_grid, search

TRIALS = 2000

print("single pass over a full 16-way random set, one miss per access")
for m in (8, 16, 32, 48):
    r = evaluate(EvictionStrategy(m, 1, 1), toy_profile(), TRIALS, seed=m)
    print(f"  m={m:2d}  measured {r.eviction_rate:.3f}  closed form {1 - (15 / 16) ** m:.3f}")

prof = load_profile("alcatel-pop2")
ranked = search(parse_grid("N=16..24,A=1..4,D=1..6"), prof, TRIALS, seed=1)
print("\nbest strategies on alcatel-pop2 (N, A, D -> rate, cycles)")
for s, r in ranked[:5]:
    print(f"  {s}  {r.eviction_rate:.4f}  {r.avg_cycles:.0f}")

top = ranked[0][0]
for n in (top.N, 2 * top.N, 3 * top.N):
    r = evaluate(EvictionStrategy(n, 1, 1), prof, TRIALS, seed=2)
    print(f"single pass N={n:2d}: {r.eviction_rate:.4f}")
