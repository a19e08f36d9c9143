#pragma once

#include <functional>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "oplrp/graph.hpp"
#include "oplrp/tensor.hpp"

namespace oplrp {

/// Model score under growing occlusion. xs holds the fraction of features
/// occluded and always starts at 0 with ys[0] == baseline.
struct PerturbationCurve {
  enum class Kind { MoRF, LeRF };
  Kind kind = Kind::MoRF;
  std::vector<double> xs;
  std::vector<double> ys;
  double baseline = 0.0;
};

enum class Occlusion {
  mean_fill,
  zero_fill,
  blur_fill,  // replace occluded pixels by a Gaussian-blurred copy; inputs
              // must carry a 2-D spatial layout in their trailing extents
};

/// Builds the most-relevant-first and least-relevant-first curves by
/// cumulatively occluding features in attribution order and re-scoring the
/// model. Ties break toward the lower feature index. Throws if
/// steps * occlude_per_step exceeds the feature count.
template <typename T>
std::pair<PerturbationCurve, PerturbationCurve> morf_lerf(
    const std::function<double(const TensorT<T>&)>& score, const TensorT<T>& input,
    const TensorT<T>& attributions, std::size_t steps, std::size_t occlude_per_step,
    Occlusion occlusion);

/// Trapezoidal area under the curve on the x axis normalized to [0, 1].
double curve_auc(const PerturbationCurve& curve);

/// AUC(LeRF) - AUC(MoRF); higher means more faithful attributions.
double abpc(const PerturbationCurve& morf, const PerturbationCurve& lerf);

/// {baseline-AUC minus MoRF-AUC, baseline-AUC minus LeRF-AUC}.
std::pair<double, double> comprehensiveness_sufficiency(const PerturbationCurve& morf,
                                                        const PerturbationCurve& lerf,
                                                        double baseline);

/// 1 when any of the top-k attributed feature indices lies in the truth set.
template <typename T>
bool topk_hit(const TensorT<T>& attributions, const std::unordered_set<std::size_t>& truth,
              std::size_t k);

struct CoverageReport {
  struct Row {
    std::string kind;
    std::size_t count = 0;
    bool covered = true;
  };
  std::vector<Row> rows;  // sorted by kind name
  std::size_t covered_nodes = 0;
  std::size_t total_nodes = 0;
  std::vector<std::string> uncovered_kinds;
};

/// Counts nodes per kind against the rule registry. Foreign kinds imported as
/// Unsupported report under their original names.
template <typename T>
CoverageReport coverage_report(const GraphT<T>& graph);

/// Separable Gaussian blur over the trailing two extents (reflect padding),
/// applied independently per leading slice. Used by Occlusion::blur_fill.
template <typename T>
TensorT<T> gaussian_blur2d(const TensorT<T>& image, int kernel, double sigma);

/// P2 (ASCII) PGM, relevance min-max scaled to 0..255. The tensor is
/// flattened to rows x cols using its trailing two extents.
template <typename T>
std::string to_pgm_p2(const TensorT<T>& image);

template <typename T>
std::string attribution_csv(const TensorT<T>& attributions);  // feature_index,relevance

std::string curves_csv(const PerturbationCurve& morf, const PerturbationCurve& lerf);

}  // namespace oplrp
