"""Critical-representation fine-tuning on a micro transformer."""

from ._core import (
    CheckpointError,
    Interventions,
    Model,
    ShapeError,
    TaskSample,
    attention_grid,
    desk_task,
    evaluate,
    forward,
    gen_chain_arith,
    greedy_decode,
    identify,
    multi_referential_filter,
    param_count,
    render,
    render_csv,
    render_pgm,
    run_cli,
    saliency_grid,
    select_positions,
    self_referential_filter,
    train_crft,
)

__all__ = [
    "CheckpointError",
    "Interventions",
    "Model",
    "ShapeError",
    "TaskSample",
    "attention_grid",
    "desk_task",
    "evaluate",
    "forward",
    "gen_chain_arith",
    "greedy_decode",
    "identify",
    "multi_referential_filter",
    "param_count",
    "render",
    "render_csv",
    "render_pgm",
    "run_cli",
    "saliency_grid",
    "select_positions",
    "self_referential_filter",
    "train_crft",
]
