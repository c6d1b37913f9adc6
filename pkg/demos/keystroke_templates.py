"""Telling input events apart from which library lines they touch.

Profiles the shipped five-event input library, prints the strongest
address per event, then classifies a short replayed sequence.
"""
import numpy as np

from armcache.analysis import TemplateBench, classify_events, profile
from armcache.cachesim import Hierarchy, load_profile
from armcache.scenarios import load_scenario
from armcache.timing import timer
from armcache.victims import EventLibrary, trigger_event

sc = load_scenario("template-libinput", "template")
lib = EventLibrary.from_dict(sc["library"])
rng = np.random.default_rng(3)
bench = TemplateBench(Hierarchy(load_profile(sc["profile"]), 3), lib, timer(sc["timer"]), rng, space_seed=3)
pr = sc["profiling"]
matrix = profile(bench, pr["events"], pr["duration"], pr["spacing"])
for j, kind in enumerate(matrix.events):
    col = matrix.hits[:, j]
    print(f"{kind:10s} strongest line {matrix.addresses[int(col.argmax())]:#x} ({col.max()} hits)")

kinds = sorted(lib.footprints)
t0, gap = bench.sched.now + 100_000, sc["replay"]["spacing"]
sequence = [kinds[i] for i in rng.integers(0, len(kinds), 8)]
acts = [trigger_event(lib, k, t0 + j * gap) for j, k in enumerate(sequence)]
traces, _ = bench.run(acts, len(acts) * gap + 200_000)
print("replayed  :", sequence)
print("classified:", [d.kind for d in classify_events(matrix, traces, sc["replay"]["merge_gap"])])
