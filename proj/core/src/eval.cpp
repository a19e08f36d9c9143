#include "oplrp/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace oplrp {

template <typename T>
std::pair<PerturbationCurve, PerturbationCurve> morf_lerf(
    const std::function<double(const TensorT<T>&)>& score, const TensorT<T>& input,
    const TensorT<T>& attributions, std::size_t steps, std::size_t occlude_per_step,
    Occlusion occlusion) {
  if (attributions.shape() != input.shape())
    throw std::invalid_argument("morf_lerf: attributions must match the input shape");
  const std::size_t n = input.size();
  if (steps * occlude_per_step > n)
    throw std::invalid_argument("morf_lerf: occluding " +
                                std::to_string(steps * occlude_per_step) + " of " +
                                std::to_string(n) + " features");

  T fill = T(0);
  TensorT<T> fill_image;
  if (occlusion == Occlusion::mean_fill) {
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += input[i];
    fill = acc / static_cast<T>(n);
  } else if (occlusion == Occlusion::blur_fill) {
    if (input.rank() < 2)
      throw std::invalid_argument("morf_lerf: blur occlusion needs a 2-D spatial layout");
    fill_image = gaussian_blur2d(input, 5, 2.0);
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return attributions[a] > attributions[b];
  });

  const double baseline = score(input);
  auto sweep = [&](bool descending) {
    PerturbationCurve c;
    c.kind = descending ? PerturbationCurve::Kind::MoRF : PerturbationCurve::Kind::LeRF;
    c.baseline = baseline;
    c.xs.push_back(0.0);
    c.ys.push_back(baseline);
    TensorT<T> work = input;
    for (std::size_t s = 0; s < steps; ++s) {
      for (std::size_t i = 0; i < occlude_per_step; ++i) {
        const std::size_t pos = s * occlude_per_step + i;
        const std::size_t feat = descending ? order[pos] : order[n - 1 - pos];
        work[feat] = occlusion == Occlusion::blur_fill ? fill_image[feat] : fill;
      }
      c.xs.push_back(static_cast<double>((s + 1) * occlude_per_step) / static_cast<double>(n));
      c.ys.push_back(score(work));
    }
    return c;
  };
  return {sweep(true), sweep(false)};
}

double curve_auc(const PerturbationCurve& curve) {
  if (curve.xs.size() != curve.ys.size() || curve.xs.empty())
    throw std::invalid_argument("curve_auc: malformed curve");
  if (curve.xs.size() == 1) return 0.0;
  const double span = curve.xs.back() - curve.xs.front();
  if (span <= 0.0) throw std::invalid_argument("curve_auc: xs must increase");
  double area = 0.0;
  for (std::size_t i = 1; i < curve.xs.size(); ++i) {
    const double dx = (curve.xs[i] - curve.xs[i - 1]) / span;
    area += 0.5 * (curve.ys[i] + curve.ys[i - 1]) * dx;
  }
  return area;
}

double abpc(const PerturbationCurve& morf, const PerturbationCurve& lerf) {
  if (morf.xs != lerf.xs)
    throw std::invalid_argument("abpc: curves were sampled at different steps");
  if (morf.xs.size() <= 1) return 0.0;
  return curve_auc(lerf) - curve_auc(morf);
}

std::pair<double, double> comprehensiveness_sufficiency(const PerturbationCurve& morf,
                                                        const PerturbationCurve& lerf,
                                                        double baseline) {
  const double comp = morf.xs.size() <= 1 ? 0.0 : baseline - curve_auc(morf);
  const double suff = lerf.xs.size() <= 1 ? 0.0 : baseline - curve_auc(lerf);
  return {comp, suff};
}

template <typename T>
bool topk_hit(const TensorT<T>& attributions, const std::unordered_set<std::size_t>& truth,
              std::size_t k) {
  const std::size_t n = attributions.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return attributions[a] > attributions[b];
  });
  for (std::size_t i = 0; i < std::min(k, n); ++i)
    if (truth.count(order[i]) != 0) return true;
  return false;
}

template <typename T>
CoverageReport coverage_report(const GraphT<T>& graph) {
  CoverageReport report;
  std::map<std::string, CoverageReport::Row> rows;
  for (const auto& node : graph.nodes()) {
    const bool covered = node.kind != OpKind::Unsupported;
    std::string name(op_kind_name(node.kind));
    if (!covered && !node.attrs.label.empty()) name = node.attrs.label;
    auto& row = rows[name];
    row.kind = name;
    row.covered = covered;
    ++row.count;
    ++report.total_nodes;
    if (covered) ++report.covered_nodes;
  }
  for (auto& [name, row] : rows) {
    if (!row.covered) report.uncovered_kinds.push_back(name);
    report.rows.push_back(std::move(row));
  }
  return report;
}

template <typename T>
TensorT<T> gaussian_blur2d(const TensorT<T>& image, int kernel, double sigma) {
  if (image.rank() < 2 || kernel <= 0 || kernel % 2 == 0)
    throw std::invalid_argument("gaussian_blur2d: needs trailing 2-D extents and an odd kernel");
  const std::size_t W = image.shape().back();
  const std::size_t H = image.shape()[image.rank() - 2];
  const std::size_t slices = image.size() / (H * W);
  std::vector<double> k(kernel);
  const int half = kernel / 2;
  double norm = 0;
  for (int i = 0; i < kernel; ++i) {
    const double d = i - half;
    k[i] = std::exp(-0.5 * d * d / (sigma * sigma));
    norm += k[i];
  }
  for (auto& v : k) v /= norm;
  auto reflect = [](std::int64_t i, std::int64_t extent) {
    if (i < 0) i = -i - 1;
    if (i >= extent) i = 2 * extent - 1 - i;
    return static_cast<std::size_t>(std::clamp<std::int64_t>(i, 0, extent - 1));
  };
  TensorT<T> rows(image.shape());
  for (std::size_t s = 0; s < slices; ++s)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double acc = 0;
        for (int i = 0; i < kernel; ++i)
          acc += k[i] * image[(s * H + y) * W + reflect(std::int64_t(x) + i - half, W)];
        rows[(s * H + y) * W + x] = static_cast<T>(acc);
      }
  TensorT<T> out(image.shape());
  for (std::size_t s = 0; s < slices; ++s)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double acc = 0;
        for (int i = 0; i < kernel; ++i)
          acc += k[i] * rows[(s * H + reflect(std::int64_t(y) + i - half, H)) * W + x];
        out[(s * H + y) * W + x] = static_cast<T>(acc);
      }
  return out;
}

template <typename T>
std::string to_pgm_p2(const TensorT<T>& image) {
  if (image.rank() < 1) throw std::invalid_argument("to_pgm_p2: empty image");
  const std::size_t cols = image.shape().back();
  const std::size_t rows = image.size() / cols;
  T lo = image[0], hi = image[0];
  for (std::size_t i = 0; i < image.size(); ++i) {
    lo = std::min(lo, image[i]);
    hi = std::max(hi, image[i]);
  }
  const double span = static_cast<double>(hi - lo);
  std::ostringstream os;
  os << "P2\n" << cols << ' ' << rows << "\n255\n";
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      int v = 0;
      if (span > 0.0)
        v = static_cast<int>(
            std::lround(255.0 * (static_cast<double>(image[r * cols + c] - lo) / span)));
      os << v << (c + 1 < cols ? ' ' : '\n');
    }
  }
  return os.str();
}

template <typename T>
std::string attribution_csv(const TensorT<T>& attributions) {
  std::ostringstream os;
  os << "feature_index,relevance\n";
  os.precision(17);
  for (std::size_t i = 0; i < attributions.size(); ++i)
    os << i << ',' << attributions[i] << '\n';
  return os.str();
}

std::string curves_csv(const PerturbationCurve& morf, const PerturbationCurve& lerf) {
  if (morf.xs != lerf.xs)
    throw std::invalid_argument("curves_csv: curves were sampled at different steps");
  std::ostringstream os;
  os << "step,fraction,morf,lerf\n";
  os.precision(17);
  for (std::size_t i = 0; i < morf.xs.size(); ++i)
    os << i << ',' << morf.xs[i] << ',' << morf.ys[i] << ',' << lerf.ys[i] << '\n';
  return os.str();
}

#define OPLRP_INSTANTIATE_EVAL(T)                                                             \
  template std::pair<PerturbationCurve, PerturbationCurve> morf_lerf(                         \
      const std::function<double(const TensorT<T>&)>&, const TensorT<T>&, const TensorT<T>&, \
      std::size_t, std::size_t, Occlusion);                                                   \
  template bool topk_hit(const TensorT<T>&, const std::unordered_set<std::size_t>&,          \
                         std::size_t);                                                        \
  template TensorT<T> gaussian_blur2d(const TensorT<T>&, int, double);                       \
  template CoverageReport coverage_report(const GraphT<T>&);                                 \
  template std::string to_pgm_p2(const TensorT<T>&);                                         \
  template std::string attribution_csv(const TensorT<T>&)

OPLRP_INSTANTIATE_EVAL(double);
OPLRP_INSTANTIATE_EVAL(float);

}  // namespace oplrp
