#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>

namespace dknn {

/// Binary OOD evaluation. Scores follow "higher = more OOD"; the ID set is the positive
/// class for FPR95, so an OOD sample scoring at or below the threshold is a false positive.
struct EvalResult {
    double auroc = 0.0;
    double fpr95 = 0.0;
    std::size_t n_id = 0;
    std::size_t n_ood = 0;
    double threshold_at_95tpr = 0.0;
};

/// Mann-Whitney statistic P(ood > id) + 0.5 P(ood == id), computed by sorting.
double auroc(std::span<const double> id_scores, std::span<const double> ood_scores);

struct FprAtTpr {
    double fpr = 0.0;
    double threshold = 0.0;
};

/// threshold = smallest observed ID score t with |{id <= t}| / n_id >= tpr_target;
/// fpr = |{ood <= t}| / n_ood.
FprAtTpr fpr_at_tpr(std::span<const double> id_scores, std::span<const double> ood_scores,
                    double tpr_target = 0.95);

EvalResult evaluate(std::span<const double> id_scores, std::span<const double> ood_scores);

inline constexpr std::string_view kEvalCsvHeader = "method,ood_name,fpr95,auroc,n_id,n_ood";

/// `method,ood_name,fpr95,auroc,n_id,n_ood`
std::string to_csv_row(std::string_view method, std::string_view ood_name, const EvalResult& result);

}  // namespace dknn
