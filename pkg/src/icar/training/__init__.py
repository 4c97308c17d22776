from icar.training.loop import (HISTORY_COLUMNS, evaluate_r1, load_icar,
                                make_optimizer, save_icar, train_loop,
                                train_step, write_history_csv)
from icar.training.loss import (DualPathConfig, LossPair,
                                clip_contrastive_loss, dual_path_loss,
                                last_similarity_stats, select_exits)

__all__ = [
    "DualPathConfig",
    "HISTORY_COLUMNS",
    "LossPair",
    "clip_contrastive_loss",
    "dual_path_loss",
    "evaluate_r1",
    "last_similarity_stats",
    "load_icar",
    "make_optimizer",
    "save_icar",
    "select_exits",
    "train_loop",
    "train_step",
    "write_history_csv",
]
