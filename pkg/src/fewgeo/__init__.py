"""Few-shot social user geolocation via user-location contrastive learning."""

from .config import (
    ConfigError,
    EncoderConfig,
    EvalConfig,
    ObjectiveConfig,
    RepresentationConfig,
    RunConfig,
    SplitConfig,
    TrainConfig,
    load_run_config,
    run_config_from_dict,
    run_config_to_dict,
)
from .corpus import (
    DatasetFormatError,
    EmptyDatasetError,
    FewShotSplit,
    LocationLabel,
    PostRecord,
    SplitError,
    UserRecord,
    filter_minority_classes,
    load_dataset,
    load_split_manifest,
    make_shot_subsets,
    make_split,
    save_dataset,
    save_split_manifest,
)
from .encoder import CLS_ID, HashingTokenizer, TextEncoder, TinyTextEncoder, TokenSequence
from .eval import EvalReport, evaluate, haversine_km, predict, predict_users
from .geo_prompt import (
    DEFAULT_SEMI_SOFT_TEMPLATE,
    TEMPLATE_BANK,
    HardPrompt,
    LocationBank,
    PromptSpec,
    SoftPrompt,
    apply_hard,
    bank_embeddings,
    build_prompt,
    encode_location_hard,
    encode_location_soft,
    location_matrix,
)
from .model import GeoModel, build_model
from .objectives import (
    MatchFusionKind,
    MatchHead,
    MiningKind,
    MiningPolicy,
    SimilarityRow,
    class_loss,
    contrastive_loss,
    contrastive_loss_batch,
    joint_loss,
    match_scores,
    matching_loss,
    mine_negatives,
)
from .synth import generate_corpus, write_corpus
from .trainer import RunResult, TrainingDivergedError, TrainResult, run_fewshot, run_zeroshot, train
from .user_repr import (
    FieldFilter,
    FusionEncoder,
    FusionKind,
    IntegrationKind,
    IntegrationStrategy,
    embed_sentences,
    fuse,
    integrate,
    select_fields,
    user_sentences,
)

__version__ = "0.1.0"
