"""Trajectory-conditioned first-person scene synthesis.

Pipeline: rectify a first-person RGBD view against its ground frame, build
the overhead height map, sweep a textured walkability tunnel along the future
trajectory, retrieve a compatible future scene, compose both tunnels at a
transitional range, and fill the adjoining band.
"""

from .proxemic import (GroundFrame, ProxemicPoint, RectifiedCamera,
                       ground_frame_from_motion, proxemic_to_world,
                       rectify_image, rectifying_rotation, unrectify_image,
                       world_to_proxemic)
from .egomap import (HeightGridSpec, HeightMap, build_height_map,
                     estimate_ground_plane, query_height)
from .scene_io import (CameraModel, CorpusManifest, SceneBundle, load_bundle,
                       load_corpus, save_bundle)
from .tunnel import (ActionTunnel, CrossSection, Trajectory, TunnelParams,
                     build_tunnel, cross_section, lift_from_image,
                     project_tunnel, transform_tunnel)
from .compose import (CompositeResult, GroundTransform, TransitionSpec,
                      align_tunnels, compose, make_training_pair, split_tunnel)
from .gapfill import (FillerEndpoint, FillRequest, fill_diffusion,
                      fill_external, score_realism)
from .retrieval import (Match, RetrievalWeights, SceneDescriptor,
                        build_descriptor, motion_distance, rerank_by_realism,
                        retrieve, spatial_distance, visual_distance,
                        visual_feature)
from .evalbench import EvalConfig, SweepReport, missing_data_sweep, ncc, run_sweep
from .synthgen import SceneSpec, make_corpus, render_scene

__version__ = "0.1.0"
