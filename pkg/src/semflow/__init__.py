"""Flow-aligned semantic segmentation on a small numpy autodiff engine."""
from .align import FAM, GDFAM, PPM, fam_forward, gated_fuse, gdfam_forward, ppm_forward
from .net import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .tensor import Tape, Tensor, gradcheck
from .train import TrainConfig, ohem_ce_loss, train_loop
from .warp import bilinear_upsample, grid_warp, warp_oracle

__version__ = "0.1.0"
