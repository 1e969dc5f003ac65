#pragma once

#include "cut/core/tensor.hpp"

namespace cut::losses {

inline constexpr double kProbabilityClamp = 1e-7;

struct LossConfig {
  double beta = 0.2;   // adapted-Dice scale
  double omega = 6.0;  // weight on the pixel terms
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
};

void validate(const LossConfig& config);

// Soft Dice with +1 smoothing: (2 sum(y*yhat) + 1) / (sum y + sum yhat + 1).
double dice_coeff(const Map2D& y, const Map2D& yhat);

// 1 - d / (d + beta).
double adapted_dice_from_coeff(double d, double beta);
double adapted_dice_loss(const Map2D& y, const Map2D& yhat, double beta);

// -alpha (1 - p_t)^gamma log p_t, p clamped to [1e-7, 1 - 1e-7]. alpha
// weights both classes.
double focal_loss(int y_img, double p, const LossConfig& config);
double focal_loss_grad(int y_img, double p, const LossConfig& config);  // d/dp

// Mean per-pixel binary cross-entropy, predictions clamped as above.
double bce_loss(const Map2D& y, const Map2D& yhat);

struct LossTerms {
  double focal = 0.0;
  double bce = 0.0;
  double dice = 0.0;
  double total = 0.0;
};

LossTerms loss_terms(int y_img, double p_img, const Map2D& y_pix, const Map2D& m_pix, const LossConfig& config);
double total_loss(int y_img, double p_img, const Map2D& y_pix, const Map2D& m_pix, const LossConfig& config);

struct LossGradient {
  LossTerms terms;
  double d_p_img = 0.0;
  Map2D d_m_pix;
};

// Analytic gradient of total_loss with respect to p_img and every m_pix
// entry. Clamped entries get zero BCE gradient.
LossGradient total_loss_grad(int y_img, double p_img, const Map2D& y_pix, const Map2D& m_pix,
                             const LossConfig& config);

}  // namespace cut::losses
