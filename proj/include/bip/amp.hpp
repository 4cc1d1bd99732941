#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "bip/errors.hpp"
#include "bip/nn.hpp"
#include "bip/rng.hpp"
#include "bip/sim.hpp"
#include "bip/terrain.hpp"

namespace bip::amp {

// Planar AMP feature state, 12 values. Mapping from the 31-dim 3D state:
//   joint positions   12 -> 4
//   joint velocities  12 -> 4
//   base linear vel    3 -> 2   (x, z)
//   base angular vel   3 -> 1   (pitch)
//   base height        1 -> 1   (relative to terrain)
inline constexpr std::size_t kStateDim = 12;
inline constexpr std::size_t kTransitionDim = 2 * kStateDim;

struct AmpState {
  std::array<double, kStateDim> v{};

  bool finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

/// Single assembly point used by both the demo and the agent pipelines,
/// so the two can never drift apart in layout or conventions.
inline AmpState assemble_amp_state(const std::array<double, 4>& joint_pos,
                                   const std::array<double, 4>& joint_vel, double base_vx,
                                   double base_vz, double base_w, double height) {
  AmpState s;
  for (std::size_t i = 0; i < 4; ++i) {
    s.v[i] = joint_pos[i];
    s.v[4 + i] = joint_vel[i];
  }
  s.v[8] = base_vx;
  s.v[9] = base_vz;
  s.v[10] = base_w;
  s.v[11] = height;
  return s;
}

inline AmpState build_amp_state(const sim::SimState& st, const terrain::HeightField& field) {
  std::array<double, 4> q{}, qd{};
  for (std::size_t i = 0; i < 4; ++i) {
    q[i] = st.q[3 + i];
    qd[i] = st.qd[3 + i];
  }
  const double height = st.q[1] - terrain::height_at(field, st.q[0]);
  return assemble_amp_state(q, qd, st.qd[0], st.qd[1], st.qd[2], height);
}

enum class Source : std::uint8_t { Demo, Agent };

struct AmpTransition {
  AmpState s;
  AmpState s_next;
  Source source = Source::Agent;
};

inline Vec transition_input(const AmpTransition& tr) {
  Vec x(kTransitionDim);
  for (std::size_t i = 0; i < kStateDim; ++i) {
    x[i] = tr.s.v[i];
    x[kStateDim + i] = tr.s_next.v[i];
  }
  return x;
}

/// Bounded FIFO of agent transitions with uniform seeded sampling.
class AgentTransitionBuffer {
 public:
  explicit AgentTransitionBuffer(std::size_t capacity = 100000) : capacity_(capacity) {}

  void push(const AmpTransition& tr) {
    if (data_.size() < capacity_) {
      data_.push_back(tr);
    } else {
      data_[head_] = tr;
      head_ = (head_ + 1) % capacity_;
    }
  }

  std::size_t size() const { return data_.size(); }
  std::size_t capacity() const { return capacity_; }

  std::vector<AmpTransition> sample(std::size_t n, Rng& rng) const {
    if (data_.empty()) throw ConfigError("AgentTransitionBuffer: sampling from empty buffer");
    std::vector<AmpTransition> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(data_[rng.uniform_index(data_.size())]);
    return out;
  }

 private:
  std::size_t capacity_;
  std::size_t head_ = 0;
  std::vector<AmpTransition> data_;
};

/// Discriminator network: 24 inputs, tanh hidden layers, linear scalar.
inline nn::Mlp make_discriminator(Rng& rng, const std::vector<std::size_t>& hidden = {256, 128}) {
  std::vector<std::size_t> sizes{kTransitionDim};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(1);
  return nn::make_mlp("disc", sizes, nn::Activation::Tanh, rng);
}

inline double discriminator_score(const nn::Mlp& disc, const AmpTransition& tr) {
  if (disc.in_dim() != kTransitionDim)
    throw ShapeError("discriminator_score: network input must be 24-dim");
  return nn::forward_only(disc, transition_input(tr))[0];
}

/// Style reward: max[0, 1 - 0.25 (score - 1)^2], in [0, 1].
inline double style_reward(double score) {
  const double d = score - 1.0;
  return std::max(0.0, 1.0 - 0.25 * d * d);
}

/// Mean squared norm of the discriminator's input gradients over a demo
/// batch, plus its exact parameter gradient.
inline std::pair<double, nn::Grad> gradient_penalty(const nn::Mlp& disc,
                                                    const std::vector<AmpTransition>& demo_batch) {
  if (demo_batch.empty()) throw ConfigError("gradient_penalty: empty batch");
  nn::Grad acc = nn::Grad::zeros_like(disc);
  double value = 0.0;
  const double inv_n = 1.0 / static_cast<double>(demo_batch.size());
  for (const auto& tr : demo_batch) {
    auto [y, tape] = nn::forward(disc, transition_input(tr));
    auto [p, g] = nn::input_grad_sq_param_grad(disc, tape);
    value += p * inv_n;
    acc.add(g, inv_n);
  }
  return {value, std::move(acc)};
}

/// Least-squares discriminator objective with +-1 targets and the
/// input-gradient penalty on demo samples:
///   mean_D (D-1)^2 + mean_A (D+1)^2 + (alpha_gp/2) mean_D ||dD/dx||^2
inline std::pair<double, nn::Grad> discriminator_loss(const nn::Mlp& disc,
                                                      const std::vector<AmpTransition>& demo_batch,
                                                      const std::vector<AmpTransition>& agent_batch,
                                                      double alpha_gp) {
  if (demo_batch.empty() || agent_batch.empty())
    throw ConfigError("discriminator_loss: empty batch");
  nn::Grad acc = nn::Grad::zeros_like(disc);
  double loss = 0.0;
  const double inv_nd = 1.0 / static_cast<double>(demo_batch.size());
  const double inv_na = 1.0 / static_cast<double>(agent_batch.size());
  for (const auto& tr : demo_batch) {
    auto [y, tape] = nn::forward(disc, transition_input(tr));
    const double e = y[0] - 1.0;
    loss += e * e * inv_nd;
    acc.add(nn::backward(disc, tape, {2.0 * e * inv_nd}).first);
  }
  for (const auto& tr : agent_batch) {
    auto [y, tape] = nn::forward(disc, transition_input(tr));
    const double e = y[0] + 1.0;
    loss += e * e * inv_na;
    acc.add(nn::backward(disc, tape, {2.0 * e * inv_na}).first);
  }
  if (alpha_gp != 0.0) {
    auto [p, g] = gradient_penalty(disc, demo_batch);
    loss += 0.5 * alpha_gp * p;
    acc.add(g, 0.5 * alpha_gp);
  }
  return {loss, std::move(acc)};
}

}  // namespace bip::amp
