"""Simulated ARM cache hierarchies and the cache attacks that run on them."""
__version__ = "0.1.0"

from .cachesim import DeviceProfile, Hierarchy, Kind, Level, load_profile, toy_profile
from .timing import Threshold, TimerModel, calibrate, timer

__all__ = ["DeviceProfile", "Hierarchy", "Kind", "Level", "Threshold", "TimerModel", "calibrate",
           "load_profile", "timer", "toy_profile", "__version__"]
