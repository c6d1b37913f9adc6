"""Recovering the upper nibble of every AES key byte from T-table cache lines.

The victim encrypts chosen plaintexts with a T-table AES that shares its
tables with the attacker; Evict+Reload on two lines per table shows which
plaintext nibble makes the victim touch them.
"""
import numpy as np

from armcache.analysis import AESAttack, aes_recover_upper_nibbles
from armcache.cachesim import Hierarchy, load_profile
from armcache.eviction import EvictionStrategy
from armcache.memspace import PhysicalMemory, ProcessSpace
from armcache.scenarios import load_scenario
from armcache.timing import timer
from armcache.victims import TTableAES, random_disalignment

sc = load_scenario("aes", "aes")
prof = load_profile(sc["profile"])
rng = np.random.default_rng(7)
h, mem = Hierarchy(prof, 7), PhysicalMemory(prof.physical_memory, seed=7)
key = rng.integers(0, 256, 16, dtype=np.uint8).tobytes()
victim = TTableAES(h, ProcessSpace("victim", mem), key, mode="shared", disalignment=random_disalignment(rng))
attack = AESAttack(h, victim, ProcessSpace("attacker", mem), "er", timer(sc["timer"]), rng,
                   strategy=EvictionStrategy(**sc["strategy"]), lines_per_table=sc["lines_per_table"],
                   locate_rounds=sc["locate_rounds"])
est = aes_recover_upper_nibbles(attack, 512, sc["margin_floor"])
print("key upper nibbles:", " ".join(f"{b >> 4:x}" for b in key))
print("recovered       :", " ".join("?" if e.nibble is None else f"{e.nibble:x}" for e in est))
print("smallest margin :", f"{min(e.margin for e in est):.3f}")
