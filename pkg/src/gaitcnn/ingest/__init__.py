"""From frame sequences to normalised, augmented modality cuboids."""
from .cuboids import (MeanVolume, ModalityCuboid, PipelineConfig, augment, build_cuboids,
                      compute_mean, crop_and_align, localize, mirror, normalize, shift,
                      stack_flow, unstack_flow, window_starts)
from .flow import estimate_flow, sequence_flow
from .frames import (MODALITIES, SPLITS, FrameSequence, ManifestEntry, fill_depth_holes,
                     load_sequence, read_flo, read_manifest, read_pgm, resize_frames,
                     write_flo, write_manifest, write_pgm)
