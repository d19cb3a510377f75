"""Desk-scale, seed-deterministic simulator of a hybrid digital-analog
task-oriented semantic link: linear analog feature transmission refined by
parity-only distributed source coding, a joint rate/power allocator, a
parity-based model-update protocol, and a Monte-Carlo sweep harness."""

from .allocator import (
    AllocationPlan,
    AllocatorContext,
    FerTable,
    allocate_exhaustive,
    allocate_greedy,
    model_analog_distortion,
    model_digital_distortion,
    system_distortion,
)
from .analog import AnalogFrame, Ieo, decode_analog, encode_analog, extend_ieo
from .channel import ChannelBudget, ChannelState, multiplex, transmit
from .codec import (
    SemanticFeature,
    TaskModel,
    analyze,
    build_task_model,
    calibrate_prior_vars,
    data_distortion,
    select_task_related,
    semantic_distortion,
    synthesize,
    synthesize_full,
    task_metric,
)
from .digital import (
    CodeSpec,
    ParityFrame,
    QuantizerSpec,
    crc16,
    demodulate,
    dequantize,
    dsc_decode,
    dsc_encode,
    modulate,
    quantize,
    refine,
    side_info_llrs,
    viterbi_decode,
)
from .errors import (
    AllocationError,
    ConfigError,
    FormatError,
    InfeasibleAllocationError,
    ParameterError,
)
from .harness import (
    ExperimentConfig,
    SweepRow,
    calibrate_fer,
    detect_effects,
    run_point,
    run_sweep,
)
from .seu import (
    DriftSpec,
    ModelParams,
    drift,
    seu_overhead_report,
    seu_send_floats,
    seu_update_ints,
)
from .sources import (
    SourceBlock,
    SourceSpec,
    gen_class_mixture,
    gen_gauss_markov,
    load_pgm,
)

__version__ = "0.1.0"
