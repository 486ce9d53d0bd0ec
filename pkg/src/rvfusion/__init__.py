"""Early-fusion 3D object detection at desk scale.

Lidar/radar/camera point fusion into a sparse voxel grid, a small trainable
detection network with a sine/direction-bin yaw parameterization, a UKF
late-fusion tracking baseline, and distance-threshold AP evaluation, all
runnable on a built-in synthetic scene generator.
"""

__version__ = "0.1.0"
