"""Coarse-to-fine blockwise neural radiance fields on the CPU."""

from .core import (
    Aabb,
    CameraPose,
    DatasetError,
    ImageBuffer,
    Ray,
    SceneDataset,
    SceneNormalization,
    load_dataset,
    pixel_ray,
    save_dataset,
)
from .decoder import DecoderConfig, MlpDecoder, clone_decoder, create_decoder, decoder_forward, mean_appearance
from .fusion import FusionInput, global_guided_fuse, idw_blend
from .hashgrid import HashGrid, HashGridConfig, encode, encode_backward, hash_index
from .metrics import MetricReport, psnr, ssim
from .partition import BlockAssignment, build_blocks, kmeans_cluster, scale_aabb
from .renderer import OccupancyGrid, RenderConfig, composite, contract, render_image, sample_ray, update_occupancy
from .scenegen import AnalyticScene, default_scene, emit_dataset, query, reference_render
from .trainer import Checkpoint, TrainConfig, load_checkpoint, lr_schedule, save_checkpoint, train_block, train_coarse, train_step

__version__ = "0.1.0"
