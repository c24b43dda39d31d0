"""freqctl: load-frequency control playground.

A multi-machine frequency-dynamics simulator (Newton power flow + implicit
trapezoidal DAE integration), a reset/step/seed episode protocol around it,
a from-scratch DDPG agent, and a CLI harness for delayed-learning and
action-count studies.
"""

from . import errors
from ._kernels import BACKEND as kernel_backend
from .agent import (Adam, DdpgAgent, DdpgConfig, Mlp, ReplayBuffer, TrainLog,
                    load_checkpoint, run_training, save_checkpoint, train)
from .dynamics import (ControlInput, DynamicState, Event, SimConfig,
                       apply_event, coi_frequency, dynamic_residual,
                       machine_frequencies, run_until, trapezoidal_step)
from .env import (Env, EnvConfig, StepResult, compute_reward,
                  env_config_from_file, make_env)
from .netmodel import (Branch, Bus, CaseData, Generator, Governor,
                       MachineInit, PowerFlowSolution, build_admittance,
                       init_dynamics, load_case, lossless_variant, parse_case,
                       serialize_case, solve_power_flow, validate_case)

__version__ = "0.1.0"

__all__ = [
    "Adam", "Branch", "Bus", "CaseData", "ControlInput", "DdpgAgent",
    "DdpgConfig", "DynamicState", "Env", "EnvConfig", "Event", "Generator",
    "Governor", "MachineInit", "Mlp", "PowerFlowSolution", "ReplayBuffer",
    "SimConfig", "StepResult", "TrainLog", "apply_event", "build_admittance",
    "coi_frequency", "compute_reward", "dynamic_residual",
    "env_config_from_file", "errors", "init_dynamics", "kernel_backend",
    "load_case", "load_checkpoint", "lossless_variant", "machine_frequencies",
    "make_env", "parse_case", "run_training", "run_until", "save_checkpoint",
    "serialize_case", "solve_power_flow", "train", "trapezoidal_step",
    "validate_case",
]
