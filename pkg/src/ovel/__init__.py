"""Online video entity linking: streaming linker with an LLM-managed memory
block, two-stage disambiguation, and a RoFA benchmark harness."""

from ovel.datamodel import (
    CandidateSet,
    Clip,
    ClipStream,
    DatasetManifest,
    Embedding,
    Entity,
    KnowledgeBase,
    MemoryBlock,
    MemoryFormat,
    PredictionTrace,
    RunConfig,
    TraceRecord,
    validate,
)
from ovel.evaluator import linear_weights, mrr_at_k, recall_at_k, rofa
from ovel.pipeline import Engine, Variant, run_benchmark, run_static, run_stream

__version__ = "0.1.0"
