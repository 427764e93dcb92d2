"""DOCA V2V broadcast scheduling: simulator, baseline schedulers and the VRLS learner."""

__version__ = "0.1.0"
