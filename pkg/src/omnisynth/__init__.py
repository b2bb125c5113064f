"""Single-panorama novel-view synthesis toolkit.

Learns a volumetric radiance field of an indoor scene from one 360-degree
RGB-D image by reprojecting it to virtual camera positions, completing the
missing regions, and training the field while a variational selector picks
which completed panoramas to trust.
"""

__version__ = "0.1.0"
