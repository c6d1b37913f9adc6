"""Spotting whether a secure-world trustlet accepted a key, from L2 set activity.

Prime+Probe over every L2 set averages 20 calls with a valid key and 20 with
an invalid one; the squared difference lights up the sets the key-dependent
code runs in.  The second run flushes caches on every world switch and the
attacker probes after each chunk of trustlet work instead.
"""
import numpy as np

from armcache.analysis import TrustletSpy, mse_profile
from armcache.cachesim import Hierarchy, load_profile
from armcache.memspace import PhysicalMemory, ProcessSpace
from armcache.scenarios import load_scenario
from armcache.timing import timer
from armcache.victims import Trustlet

sc = load_scenario("tz-spy", "trustlet")
prof = load_profile(sc["profile"])
lo, hi = sc["band"]
for flush in (False, True):
    h = Hierarchy(prof, 5)
    t = Trustlet(h, core=sc["victim_core"], flush_on_enter=flush, band=(lo, hi), lines_per_set=sc["lines_per_set"],
                 loops=sc["loops"], prefix_sets=tuple(sc["prefix_sets"]), key_id="key-5", seed=5)
    spy = TrustletSpy(t, ProcessSpace("attacker", PhysicalMemory(prof.physical_memory, seed=5)),
                      timer(sc["timer"]), np.random.default_rng(5), sc["attacker_core"])
    res = mse_profile(spy.set_profile(True, 20), spy.set_profile(False, 20))
    top = np.argsort(res.per_set)[::-1][:8]
    print(f"flush={flush}: {res.fraction_in(lo, hi):.1%} of squared error in sets {lo}-{hi}; "
          f"top sets {sorted(top.tolist())}")
