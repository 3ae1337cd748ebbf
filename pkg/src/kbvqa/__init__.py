"""Question answering over multi-layer visual/semantic/fact graphs."""

from .autodiff import (ParamStore, Tape, Tensor, gradient_check, load_checkpoint,
                       save_checkpoint)
from .graphs import (BoundingBox, EmbeddingTable, FactNode, LayerGraph, MultiModalGraph,
                     Question, VisualNode, build_fact_graph, build_semantic_graph,
                     build_visual_graph, embed_phrase, spatial_edge_feature)
from .model import (ModelConfig, Prediction, StepTrace, bce_loss, encode_question,
                    forward, init_params, predict_answer)
from .retrieval import (CandidateFactSet, FactTriple, RelationClassifier,
                        RelationPrediction, filter_by_relation, predict_relation,
                        retrieve_top_k, score_fact)
from .training import (EvalReport, TrainingConfig, ablation_run, adam_step, evaluate,
                       lr_at, train)

__version__ = "0.1.0"
