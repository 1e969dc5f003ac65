#include "cut/losses/losses.hpp"

#include <algorithm>
#include <cmath>

#include "cut/core/error.hpp"

namespace cut::losses {

namespace {

void check_shapes(const Map2D& y, const Map2D& yhat) {
  if (!y.same_shape(yhat)) throw Error(ErrorCode::kShapeMismatch, "loss inputs differ in shape");
  if (y.empty()) throw Error(ErrorCode::kShapeMismatch, "empty loss input");
}

double clamp_p(double p) {
  if (!std::isfinite(p)) throw Error(ErrorCode::kNonFinite, "non-finite probability");
  return std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
}

void check_label(int y) {
  if (y != 0 && y != 1) throw Error(ErrorCode::kRange, "image label must be 0 or 1");
}

}  // namespace

void validate(const LossConfig& config) {
  if (!(config.beta > 0.0) || !std::isfinite(config.beta)) throw Error(ErrorCode::kRange, "beta must be > 0");
  if (!(config.omega >= 0.0) || !std::isfinite(config.omega)) throw Error(ErrorCode::kRange, "omega must be >= 0");
  if (!(config.focal_gamma >= 0.0)) throw Error(ErrorCode::kRange, "focal gamma must be >= 0");
  if (!(config.focal_alpha > 0.0 && config.focal_alpha <= 1.0)) {
    throw Error(ErrorCode::kRange, "focal alpha must lie in (0, 1]");
  }
}

double dice_coeff(const Map2D& y, const Map2D& yhat) {
  check_shapes(y, yhat);
  double inter = 0.0, sy = 0.0, sh = 0.0;
  const auto a = y.values();
  const auto b = yhat.values();
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] * b[i];
    sy += a[i];
    sh += b[i];
  }
  return (2.0 * inter + 1.0) / (sy + sh + 1.0);
}

double adapted_dice_from_coeff(double d, double beta) {
  if (!(beta > 0.0)) throw Error(ErrorCode::kRange, "beta must be > 0");
  return 1.0 - d / (d + beta);
}

double adapted_dice_loss(const Map2D& y, const Map2D& yhat, double beta) {
  return adapted_dice_from_coeff(dice_coeff(y, yhat), beta);
}

double focal_loss(int y_img, double p, const LossConfig& config) {
  check_label(y_img);
  const double q = clamp_p(p);
  const double pt = y_img == 1 ? q : 1.0 - q;
  return -config.focal_alpha * std::pow(1.0 - pt, config.focal_gamma) * std::log(pt);
}

double focal_loss_grad(int y_img, double p, const LossConfig& config) {
  check_label(y_img);
  if (!std::isfinite(p)) throw Error(ErrorCode::kNonFinite, "non-finite probability");
  if (p <= kProbabilityClamp || p >= 1.0 - kProbabilityClamp) return 0.0;
  const double pt = y_img == 1 ? p : 1.0 - p;
  const double g = config.focal_gamma;
  const double one_m = 1.0 - pt;
  // d/dpt of -a (1-pt)^g log pt
  double d_pt = -config.focal_alpha * std::pow(one_m, g) / pt;
  if (g != 0.0) d_pt += config.focal_alpha * g * std::pow(one_m, g - 1.0) * std::log(pt);
  return y_img == 1 ? d_pt : -d_pt;
}

double bce_loss(const Map2D& y, const Map2D& yhat) {
  check_shapes(y, yhat);
  double sum = 0.0;
  const auto a = y.values();
  const auto b = yhat.values();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double q = clamp_p(b[i]);
    sum += -(a[i] * std::log(q) + (1.0 - a[i]) * std::log(1.0 - q));
  }
  return sum / static_cast<double>(a.size());
}

LossTerms loss_terms(int y_img, double p_img, const Map2D& y_pix, const Map2D& m_pix, const LossConfig& config) {
  validate(config);
  LossTerms t;
  t.focal = focal_loss(y_img, p_img, config);
  t.bce = bce_loss(y_pix, m_pix);
  t.dice = adapted_dice_loss(y_pix, m_pix, config.beta);
  t.total = t.focal + config.omega * (t.bce + t.dice);
  return t;
}

double total_loss(int y_img, double p_img, const Map2D& y_pix, const Map2D& m_pix, const LossConfig& config) {
  return loss_terms(y_img, p_img, y_pix, m_pix, config).total;
}

LossGradient total_loss_grad(int y_img, double p_img, const Map2D& y_pix, const Map2D& m_pix,
                             const LossConfig& config) {
  LossGradient out;
  out.terms = loss_terms(y_img, p_img, y_pix, m_pix, config);
  out.d_p_img = focal_loss_grad(y_img, p_img, config);

  const auto y = y_pix.values();
  const auto m = m_pix.values();
  const double n = static_cast<double>(y.size());
  double inter = 0.0, sy = 0.0, sh = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    inter += y[i] * m[i];
    sy += y[i];
    sh += m[i];
  }
  const double num = 2.0 * inter + 1.0;
  const double den = sy + sh + 1.0;
  const double d = num / den;
  // dL/dd for L = 1 - d / (d + beta)
  const double dl_dd = -config.beta / ((d + config.beta) * (d + config.beta));

  out.d_m_pix = Map2D(m_pix.rows(), m_pix.cols());
  auto g = out.d_m_pix.values();
  for (std::size_t i = 0; i < y.size(); ++i) {
    double gb = 0.0;
    if (m[i] > kProbabilityClamp && m[i] < 1.0 - kProbabilityClamp) {
      gb = (-y[i] / m[i] + (1.0 - y[i]) / (1.0 - m[i])) / n;
    }
    const double dd = (2.0 * y[i] * den - num) / (den * den);
    g[i] = config.omega * (gb + dl_dd * dd);
  }
  return out;
}

}  // namespace cut::losses
