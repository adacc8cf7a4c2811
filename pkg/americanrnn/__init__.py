# Scheme: [N!]N(.N)*[{a|b|rc}N][.postN][.devN]
__version__ = '0.1.0.dev0'

from ._autodiff import (
    NonFiniteTensor,
    NonScalarLoss,
    ShapeMismatch,
    Tape,
    Tensor,
    backward,
)
from ._baselines import (
    FdGrid,
    FdSolution,
    GridTooCoarse,
    LsResult,
    ProviderOutOfDomain,
    SingularRegression,
    binomial_american,
    bs_european_call,
    bs_european_put,
    european_reference,
    fd_american_1d,
    fd_geometric_reference,
    longstaff_schwartz,
)
from ._config import ConfigError, RunConfig, load_config, parse_config
from ._evaluation import (
    EmptyPositiveClass,
    EvalReport,
    SpecMismatch,
    ZeroReference,
    evaluate,
    exercise_labels,
    f1_score,
    fd_exercise_labels,
    percent_errors,
    write_boundary_csv,
)
from ._hedging import (
    HedgeConfig,
    HedgeResult,
    Provider,
    hedge,
    replicate,
    self_financing_residuals,
)
from ._market import (
    HeterogeneousParams,
    MarketParams,
    NegativePriceWarning,
    NotPositiveDefinite,
    OptionSpec,
    PathSet,
    PayoffKind,
    cholesky,
    equivalent_1d_params,
    payoff_f,
    payoff_g,
    reduced_market,
    simulate_paths,
    smoothed_payoff,
)
from ._rnn import (
    GruLayerParams,
    Head,
    NetworkState,
    delta_net_step,
    deep_forward,
    gru_cell,
    init_weights,
    price_net_step,
)
from ._targets import (
    DegeneratePath,
    StoppingMode,
    TargetSet,
    build_targets,
    continuation_targets,
    loss,
    stopping_index,
)
from ._training import (
    AdamState,
    NonFiniteLoss,
    TrainConfig,
    TrainResult,
    adam_step,
    train,
)
