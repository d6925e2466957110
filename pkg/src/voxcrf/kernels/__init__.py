"""Hot loops, each with a numba and a numpy implementation."""
from .conv import conv3d_backward, conv3d_forward
from .gauss import BRUTEFORCE_MAX_POINTS, PermutohedralLattice, bruteforce_filter
from .interp import gather, scatter
from .pool import maxpool3d_backward, maxpool3d_forward
