"""Occlusion-aware object detection with per-cell visibility labelling.

A structured model scores a full-extent bounding box together with a binary
visible/occluded label per HOG cell inside it; inference minimizes the
energy exactly with one s-t mincut per box location, and training is a
cutting-plane structured SVM whose curvature constraints keep every iterate
graph-representable.
"""

from .errors import (FormatError, GenerationError, QPConvergenceError,
                     RepresentabilityError)
from .evaluation import (EvalCurve, PixelMask, fppi_recall, rasterize_cells,
                         refine_mask, visibility_from_mask, voc_seg_error)
from .geometry import Geometry
from .imaging import (FeaturePyramid, RasterImage, SegmentMap, build_pyramid,
                      extract_hog, load_image, project_segments,
                      read_segment_pgm, segment_and_project,
                      segment_unsupervised, write_segment_pgm)
from .inference import (CutGraph, Detection, EnergyMaps, build_energy_maps,
                        build_graph, detect, detect_multi, energy,
                        loss_augmented_detect, min_energy_labelling, mincut,
                        nms)
from .learning import (LossValue, TrainConfig, TrainResult, TrainerState,
                       TrainingSample, find_mvc, geometry_for,
                       hamming_projected, joint_train_multi, loss,
                       make_trainer_state, solve_qp, train)
from .model import (Label, ViewpointShape, WeightVector, assemble_features,
                    clique_envelope, clique_stats, load_model, pack_weights,
                    save_model, second_diff_rows, unpack_weights)
from .synthetic import SynthConfig, SynthDataset, SynthInstance, gen_synthetic

__version__ = "0.1.0"
