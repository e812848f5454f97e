"""Sequential fine-tuning with averaging (SFA) and continual-learning baselines on small MLPs."""
from .data import (Dataset, RehearsalBuffer, Task, TaskStream, buffer_update, load_idx, mix_with_buffer,
                   split_by_labels, split_mnist_even_odd, synthetic_gaussian_tasks)
from .merge import ewc_merge_step, fisher_merge, task_arithmetic, task_vector, ties_merge, wise_ft
from .metrics import RunHistory, final_average_accuracy, forgetting
from .nnet import Batch, MlpSpec, ModelParams, accuracy, fisher_diagonal, forward, init_params, loss_and_grad
from .params import l2_distance, linear_combine, weighted_average
from .trainers import (MergeBaseline, Multitask, Penalty, Rehearsal, Sequential, Sfa, SfaConfig, SgdConfig,
                       ewc_train, l2_train, rehearsal_train, sequential_run, sfa_train, sgd_step)

__version__ = "0.1.0"
