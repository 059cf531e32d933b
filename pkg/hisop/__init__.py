"""Hierarchical temporal context alignment for semantic occupancy on synthetic scenes."""
