"""
Spiking networks that learn motor commands in one shot for l2l-pcm.
"""

from l2l_pcm.snn.networks import (
    EpropParams,
    init_eprop,
    lsg_cell,
    lsg_input_count,
    trainee_cell,
)
from l2l_pcm.snn.neurons import (
    CellParams,
    NeuronState,
    alif_step,
    lif_step,
    neuron_step,
    record_population,
)
from l2l_pcm.snn.plasticity import (
    EligibilityHistory,
    EligibilityState,
    LearningSignalState,
    eligibility_update,
    inner_one_shot_update,
    learning_signal_update,
)
from l2l_pcm.snn.trainer import (
    RmseTable,
    eprop_evaluate,
    eprop_meta_train,
    eprop_outer_step,
    load_eprop_checkpoint,
    save_eprop_checkpoint,
)
from l2l_pcm.snn.trial import (
    MotorTask,
    MotorTaskFactory,
    TrialResult,
    build_trial_tape,
    deploy_trainee,
    outer_loss,
    run_trial,
    stack_tasks,
)

__all__ = [
    "EpropParams",
    "init_eprop",
    "lsg_cell",
    "lsg_input_count",
    "trainee_cell",
    "CellParams",
    "NeuronState",
    "alif_step",
    "lif_step",
    "neuron_step",
    "record_population",
    "EligibilityHistory",
    "EligibilityState",
    "LearningSignalState",
    "eligibility_update",
    "inner_one_shot_update",
    "learning_signal_update",
    "RmseTable",
    "eprop_evaluate",
    "eprop_meta_train",
    "eprop_outer_step",
    "load_eprop_checkpoint",
    "save_eprop_checkpoint",
    "MotorTask",
    "MotorTaskFactory",
    "TrialResult",
    "build_trial_tape",
    "deploy_trainee",
    "outer_loss",
    "run_trial",
    "stack_tasks",
]
