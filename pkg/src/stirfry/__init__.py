"""Leader/follower stir-fry motion: phase primitives, a structured transducer and a wok surrogate."""

from .dmp import DMP, DmpParams, PhaseChainDMP, adjust_amplitude, chain_rollout, fit_weights, rollout
from .demo_gen import DemoSpec, gen_dataset, gen_follower, gen_leader
from .exceptions import (
    CheckpointError,
    ContractError,
    DivergenceError,
    NoCyclesError,
    ParseError,
    ShapeError,
    StirfryError,
)
from .tensor import Adam, Tensor, backward, gradcheck, no_grad
from .training import TrainConfig, dtw, evaluate, normalized_dtw, soft_dtw, train
from .trajectory import PhaseCycle, Pose6D, PoseScaler, PoseSeq, read_seq, segment_phases, write_seq
from .transducer import (
    ModelConfig,
    StructuredTransformer,
    TransducerModel,
    load_checkpoint,
    rollout_autoregressive,
    save_checkpoint,
)
from .wok_sim import ContentState, LoopConfig, WokGeom, closed_loop, relative_displacement, simulate_cycle

__version__ = "0.1.0"
