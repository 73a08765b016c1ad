"""Digital-twin forecasting with confidence-aware OOD detection."""

from .timeseries import (FeatureSchema, MultivariateSeries, Normalizer,
                         WindowPair, fit_normalizer, load_csv, make_windows,
                         split_chrono)
from .model import (DTModel, LossBreakdown, ModelConfig, TrainConfig,
                    load_checkpoint, loss_forecast, loss_recon, loss_total,
                    save_checkpoint, train)
from .detect import (ForecastEnsemble, Thresholds, WindowVerdict, calibrate,
                     classify, detect_series, mc_forecast, window_scores)
from .explain import Attribution, attribute, category_color, emit_json, to_record
from .metrics import (LabeledScore, MetricsReport, auroc, f1_per_class,
                      label_windows, tnr_at_tpr95)

__version__ = "0.1.0"
