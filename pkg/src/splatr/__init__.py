"""splatr: Gaussian-splat world model for experience-goal scene rearrangement.

Train a splat of the goal scene from an exploration walkthrough, re-render
goal views along the agent's trajectory, detect patch-level changes against
current observations, accumulate object nodes, assign shuffled objects to
goal objects, and score the episode.
"""

__version__ = "0.1.0"
