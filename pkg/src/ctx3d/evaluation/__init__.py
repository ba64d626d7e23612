from .froc import (
    FP_RATES,
    FrocCurve,
    GroundTruthSet,
    MatchResult,
    froc_curve,
    match_detections,
    sensitivity_table,
    stratified_report,
)
from .report import (
    format_sensitivity_table,
    format_stratified,
    write_froc_csv,
    write_sensitivity_csv,
    write_stratified_csv,
)
