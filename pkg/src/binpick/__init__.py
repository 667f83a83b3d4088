"""Iterative object recognition for randomized bin picking.

Modules: ``geometry`` (transforms, clouds, exact nearest neighbours), ``scene``
(synthetic piles and depth capture), ``viewplan`` (occupancy grid and sensor
pose choice), ``segmentation``, ``pose`` (template matching and ICP),
``merge`` (carrying unchanged segments between trials), ``pipeline`` and
``cli``.
"""

__version__ = "0.1.0"
