"""Active-viewpoint classification laboratory.

Generate block objects of graded complexity, render them from 6-DOF poses
(optionally behind a gripper occluder), train a convolutional classifier, and
train a soft actor-critic agent that picks next-best-view poses maximizing
the classification confidence difference.
"""

__version__ = "0.1.0"
