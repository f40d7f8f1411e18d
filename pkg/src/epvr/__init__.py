"""Real-time egocentric full-body pose pipeline.

Fuses sparse headset/controller motion descriptors with egocentrically
observed 3D joint keypoints, refines the result with an energy-based
kinematic optimizer, and serves poses over a persistent binary stream
protocol.
"""

__version__ = "0.1.0"
