"""KV-cache compression as a perturbation of attention routing, on a toy GQA transformer."""
from kvroute.attention import (AttentionTensor, HiddenStates, ModelConfig, ToyModel, build_toy_model,
                               kv_memory_bytes, load_attention_dump, save_attention_dump)
from kvroute.graph import (TokenRouteGraph, answer_reachable, build_graph, compress_graph, extract_trlt,
                           head_disjoint_paths, reachable)
from kvroute.metrics import (SweepRecord, agreement_fraction, consensus, eviction_rate, failure_decomposition,
                             ger, grade_answer, susceptibility)
from kvroute.press import ScoreTensor, SurvivalMask, apply_press, press_adaptive, press_chunk, score_expected_attention

__version__ = "0.1.0"

__all__ = [
    "AttentionTensor", "HiddenStates", "ModelConfig", "ToyModel", "build_toy_model", "kv_memory_bytes",
    "load_attention_dump", "save_attention_dump",
    "TokenRouteGraph", "answer_reachable", "build_graph", "compress_graph", "extract_trlt",
    "head_disjoint_paths", "reachable",
    "SweepRecord", "agreement_fraction", "consensus", "eviction_rate", "failure_decomposition", "ger",
    "grade_answer", "susceptibility",
    "ScoreTensor", "SurvivalMask", "apply_press", "press_adaptive", "press_chunk", "score_expected_attention",
]
