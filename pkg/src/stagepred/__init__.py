"""Staged query exec-time prediction: cache, local ensemble, global graph model."""
from ._accel import backend_name
from .cache import CacheEntry, ExecCache
from .dispatch import BaselinePredictor, DispatchConfig, RetrainPolicy, StagedPrediction, StagePredictor
from .gbdt import TreeParams, UnderTrainedError, fit_baseline, fit_gbdt
from .gcn import GcnConfig, GcnModel, gcn_forward, gcn_train
from .local import Ensemble, Prediction, TrainingPool, fit_ensemble
from .metrics import ErrorStats, error_stats, prr
from .plan import PlanError, PlanGraph, PlanNode, QueryFeatures, QueryPlan, SystemContext, featurize_global, featurize_local
from .sim import QueryEvent, SimConfig, SimResult, compare, run_oracle, simulate
from .workload import Drift, WorkloadSpec, export, generate, ingest

__version__ = "0.1.0"
