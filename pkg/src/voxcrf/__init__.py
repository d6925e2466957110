"""Voxel FCNN, trilinear interpolation and a dense CRF for point cloud segmentation."""
from ._accel import backend_name
from .cloud import PointCloud, crop_subareas, load_cloud, save_cloud
from .crf import CrfParams, crf_backward, crf_forward
from .fcnn import FcnnConfig, Network
from .voxelizer import build_grid

__version__ = "0.1.0"
