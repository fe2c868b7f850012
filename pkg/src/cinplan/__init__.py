"""Grid-world path planning with learned per-state transition kernels.

A small capability classifier predicts, from each cell's local patch, the
next-state distribution for every action; those distributions drive a K-step
unrolled value-iteration planner. Includes the exact VI/BFS oracle, both
training regimes (supervised capability-alone and end-to-end imitation), and
the %Optimal / %Success / %Error evaluation harness.
"""
from .capability import (
    AdamState,
    CapabilityNet,
    CapSample,
    TrainingDiverged,
    adam_init,
    adam_step,
    collect_samples,
    curriculum_order,
    forward,
    forward_batch,
    init_net,
    kernel_mse,
    load_net,
    save_net,
    train_supervised,
    train_supervised_schedule,
)
from .e2e import ILSample, Tape, backward, forward_with_tape, tape_loss, train_e2e
from .evaluation import (
    Dataset,
    EvalReport,
    SplitData,
    emit_report,
    evaluate,
    generate_dataset,
    load_dataset,
    load_report,
    save_dataset,
)
from .gridworld import (
    ACTION_OFFSETS,
    N_ACTIONS,
    OCCUPANCY,
    TERRAIN,
    Action,
    LocalPatch,
    State,
    WorldMap,
    all_patches,
    extract_patch,
    generate_maze,
    generate_terrain,
    load_map,
    save_map,
    step,
    true_kernel,
)
from .oracle import OracleSolution, bfs_distances, expert_action, solve_exact
from .planner import (
    REACHED,
    STUCK,
    TIMEOUT,
    HyperParams,
    PlanResult,
    RolloutResult,
    build_kernel_field,
    default_hyperparams,
    greedy_action,
    plan,
    rollout,
    rollout_greedy,
    sparse_reward,
    true_kernel_field,
    vi_forward,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
