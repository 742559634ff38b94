"""Adaptable open-set intrusion detection.

Classify flows into known traffic classes, reject what no class
explains, cluster the rejects into candidate new classes, take analyst
decisions on them, and retrain on the side without dropping service.
"""

from .errors import AdaptIdsError, ConfigError, DataError, TrainingError
from .flows import (FLOW_PACKETS, PACKET_BYTES, FlowKey, FlowTensor,
                    LabeledFlow, MaskPolicy, PacketRecord, ReassemblyStats,
                    batch_matrix, load_manifest, pcap_to_flows, read_pcap,
                    reassemble_flows, tensorize, write_manifest)
from .synthetic import (SyntheticProfile, default_profile_pool,
                        generate_synthetic, load_profiles, save_profiles,
                        train_test_split)
from .model import (Adam, Architecture, ModelParams, TrainConfig,
                    build_targets, forward, init_params, loss_centroid_pull,
                    loss_one_vs_rest, loss_softmax_ce, relu6, sigmoid,
                    softmax, total_loss, train)
from .heads import (KIND_DOC, KIND_DOCPP, KIND_OPENMAX, OpenMaxConfig,
                    OpenSetModel, OpenSetVerdict, RESERVED_TRAIN_LABEL,
                    UNKNOWN, WeibullTailModel, doc_predict,
                    docpp_prepare_targets, evaluate_open_set, fit_openmax_tails,
                    fit_weibull, openmax_fit, openmax_predict,
                    openmax_recalibrate, weibull_cdf)
from .clustering import (ClusterModel, ClusterQuality, ClusterRun,
                         ExperimentOutcome, choose_k,
                         completeness_homogeneity, kmeans, label_centroids,
                         posttrain, signature_quality, silhouette_score,
                         similarity_by_clustering,
                         similarity_by_misclassification)
from .checkpoint import file_digest, load_checkpoint, save_checkpoint
from .lifecycle import (CATEGORY_MALICIOUS, CATEGORY_TEMPORARY_ANOMALY,
                        CATEGORY_UNSEEN_BENIGN, Deployment, LabelDecision,
                        LifecycleConfig, LifecycleManager, NoveltyBuffer,
                        PendingCluster, RetrainReport, apply_decisions,
                        build_novelty_clusters, train_full_model)
from .config import RunConfig, default_config, load_config
from .experiment import (ExperimentRecord, ExperimentReport,
                         run_experiment_grid, write_report)
from .service import IdsService

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
