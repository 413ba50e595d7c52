#include "dknn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dknn/error.hpp"
#include "text_format.hpp"

namespace dknn {

namespace {

std::vector<double> sorted_copy(std::span<const double> scores, const char* what)
{
    if (scores.empty()) throw Error(Errc::invalid_argument, std::string(what) + " scores are empty");
    std::vector<double> out(scores.begin(), scores.end());
    for (const double v : out) {
        if (std::isnan(v)) throw Error(Errc::non_finite, std::string(what) + " scores contain NaN");
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

double auroc(std::span<const double> id_scores, std::span<const double> ood_scores)
{
    const std::vector<double> id = sorted_copy(id_scores, "ID");
    if (ood_scores.empty()) throw Error(Errc::invalid_argument, "OOD scores are empty");

    // Twice the Mann-Whitney U, kept integral so ties contribute exactly one half.
    std::uint64_t doubled = 0;
    for (const double s : ood_scores) {
        if (std::isnan(s)) throw Error(Errc::non_finite, "OOD scores contain NaN");
        const auto lo = std::lower_bound(id.begin(), id.end(), s);
        const auto hi = std::upper_bound(lo, id.end(), s);
        doubled += 2 * static_cast<std::uint64_t>(lo - id.begin()) + static_cast<std::uint64_t>(hi - lo);
    }
    const double pairs = static_cast<double>(id.size()) * static_cast<double>(ood_scores.size());
    return static_cast<double>(doubled) / (2.0 * pairs);
}

FprAtTpr fpr_at_tpr(std::span<const double> id_scores, std::span<const double> ood_scores, double tpr_target)
{
    if (!(tpr_target > 0.0 && tpr_target <= 1.0)) {
        throw Error(Errc::invalid_argument, "TPR target must lie in (0, 1]");
    }
    const std::vector<double> id = sorted_copy(id_scores, "ID");
    const std::vector<double> ood = sorted_copy(ood_scores, "OOD");
    const double n = static_cast<double>(id.size());

    // Smallest count j with j / n >= target; the estimate is corrected in both directions
    // so the comparison is the exact floating-point one.
    auto j = static_cast<std::size_t>(std::ceil(tpr_target * n));
    j = std::clamp<std::size_t>(j, 1, id.size());
    while (j > 1 && static_cast<double>(j - 1) / n >= tpr_target) --j;
    while (j < id.size() && static_cast<double>(j) / n < tpr_target) ++j;

    // Ties: every ID score equal to the threshold is accepted, which can only raise the TPR.
    const double threshold = id[j - 1];
    const auto accepted = std::upper_bound(ood.begin(), ood.end(), threshold) - ood.begin();
    return {static_cast<double>(accepted) / static_cast<double>(ood.size()), threshold};
}

EvalResult evaluate(std::span<const double> id_scores, std::span<const double> ood_scores)
{
    EvalResult result;
    result.auroc = auroc(id_scores, ood_scores);
    const FprAtTpr fpr = fpr_at_tpr(id_scores, ood_scores, 0.95);
    result.fpr95 = fpr.fpr;
    result.threshold_at_95tpr = fpr.threshold;
    result.n_id = id_scores.size();
    result.n_ood = ood_scores.size();
    return result;
}

std::string to_csv_row(std::string_view method, std::string_view ood_name, const EvalResult& result)
{
    std::string row;
    row += method;
    row += ',';
    row += ood_name;
    row += ',' + detail::format_double(result.fpr95);
    row += ',' + detail::format_double(result.auroc);
    row += ',' + std::to_string(result.n_id);
    row += ',' + std::to_string(result.n_ood);
    return row;
}

}  // namespace dknn
