from .losses import gan_losses, minimax_value, path_length_penalty, r1_penalty
from .networks import (
    ConditionError,
    Discriminator,
    GanConfig,
    Generator,
    Variant,
    build_networks,
    normalize_latent,
)
from .ops import demodulated_weights, modulated_conv2d, upfirdn2d
from .training import (
    GanBatch,
    GanDivergenceError,
    GanState,
    StepLog,
    gan_train_step,
    init_state,
    load_checkpoint,
    make_batch,
    save_checkpoint,
    train_gan,
)
