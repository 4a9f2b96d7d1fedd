"""Cluster-wise ratio tests and vote-prioritized back-matching for image localization."""

from .ann import AnnIndex, SearchBudget, brute_force_knn, build_index, knn_search
from .bench import (EvalReport, evaluate, evaluate_location_recognition, exhaustive_local_match,
                    global_ratio_localize)
from .camera import CameraPose, Intrinsics
from .formats import load_model, save_model
from .matching import (MatchCandidate, MatchConfig, MatchSet, best_buddy_filter, cluster_wise_ratio_test,
                       global_forward_match)
from .model import Clustering, SceneModel, precompute_nn_table, validate_model
from .pipeline import FAST_VOTING, FULL_FORWARD, Localization, localize, pose_record
from .pose import PoseConfig, PoseResult, p3p_solve, ransac_pnp, refine_pose
from .query import QueryImage, load_queries, save_queries
from .synth import SynthConfig, SynthWorld, generate_world, load_preset, load_world, save_world
from .voting import BackMatchTrace, prioritized_back_match

__version__ = "0.1.0"
