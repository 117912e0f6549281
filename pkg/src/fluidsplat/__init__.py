"""Joint visual + physics optimization of 3D Gaussian scenes.

A desk-scale engine that couples an explicit Gaussian scene representation
to a differentiable Eulerian fluid / rigid-body simulator through a soft
occupancy mask, and optimizes the scene under combined image and
trajectory objectives.
"""

__version__ = "0.1.0"
