"""Few-shot multi-domain text classification with prototype-based
meta-learning and label-definition fusion."""

from .corpus import (
    Dataset,
    DomainManifest,
    Example,
    LabelDef,
    collapse_binary,
    holdout_split,
    kshot_sample,
    load_domain,
    preprocess_text,
    stratified_sample,
)
from .encoder import (
    EncoderConfig,
    HiddenStates,
    TransformerEncoder,
    Vocab,
    add_label_token,
    build_vocab,
    mlm_pretrain,
    tokenize,
)
from .evaluation import (
    EvaluationReport,
    ProtocolSpec,
    Recipe,
    emit_report,
    macro_f1,
    make_recipe,
    run_protocol,
    select_hyperparams,
)
from .fusion import FusionModel, FusionStrategy, JointAttention, fuse_input, joint_embed, represent
from .metalearn import (
    Episode,
    LearnerState,
    MetaConfig,
    Prototypes,
    compute_prototypes,
    fo_protomaml_step,
    load_checkpoint,
    meta_train,
    mldg_head_build,
    mldg_step,
    mldg_update,
    predict,
    proto_classify,
    proto_episode_loss,
    protomaml_head_init,
    sample_episode,
    save_checkpoint,
    supervised_finetune,
)

__version__ = "0.1.0"
