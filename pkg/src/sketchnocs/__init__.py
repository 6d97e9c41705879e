"""Sketch-to-point-cloud desk toolkit.

Renders sketch / NOCS-map training pairs from meshes, trains a small
multi-view conditional diffusion model that colors sketches into NOCS maps,
decodes and fuses the maps into 3D point clouds, and evaluates
reconstructions with Chamfer distance, earth mover's distance and 2D IoU.
"""

__version__ = "0.1.0"
