#pragma once

// Noise schedule, forward diffusion, denoising objective and the DDIM-style
// sampler. The schedule's `alpha` holds the cumulative signal coefficient
// (the alpha-bar of DDPM): z_t = sqrt(a_t) z_0 + sqrt(1 - a_t) eps.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mmtryon/errors.hpp"
#include "mmtryon/rng.hpp"
#include "mmtryon/tensor.hpp"

namespace mmtryon::diffusion {

enum class ScheduleKind { linear, cosine };

struct NoiseSchedule {
    int num_steps = 0;
    std::vector<double> alpha;  // cumulative, non-increasing, in (0, 1]

    void validate() const {
        if (num_steps < 1 || static_cast<int>(alpha.size()) != num_steps)
            throw std::invalid_argument("NoiseSchedule: bad length");
        double prev = 1.0;
        for (double a : alpha) {
            if (!(a > 0.0 && a <= 1.0)) throw std::invalid_argument("NoiseSchedule: alpha out of (0,1]");
            if (a > prev + 1e-15) throw std::invalid_argument("NoiseSchedule: alpha not non-increasing");
            prev = a;
        }
    }
};

// linear: DDPM beta ramp 1e-4 -> 2e-2, alpha_t = prod(1 - beta_s)
// cosine: squared-cosine cumulative schedule, clipped to (1e-5, 1]
inline NoiseSchedule make_schedule(int num_steps, ScheduleKind kind) {
    if (num_steps < 1) throw std::invalid_argument("make_schedule: num_steps must be >= 1");
    NoiseSchedule s;
    s.num_steps = num_steps;
    s.alpha.resize(static_cast<size_t>(num_steps));
    if (kind == ScheduleKind::linear) {
        const double beta0 = 1e-4, beta1 = 2e-2;
        double acc = 1.0;
        for (int t = 0; t < num_steps; ++t) {
            double beta = (num_steps == 1)
                              ? beta0
                              : beta0 + (beta1 - beta0) * static_cast<double>(t) / (num_steps - 1);
            acc *= (1.0 - beta);
            s.alpha[static_cast<size_t>(t)] = acc;
        }
    } else {
        const double offset = 0.008;
        auto f = [&](double t) {
            double x = (t / num_steps + offset) / (1.0 + offset) * M_PI / 2.0;
            return std::cos(x) * std::cos(x);
        };
        double f0 = f(0.0);
        double prev = 1.0;
        for (int t = 0; t < num_steps; ++t) {
            double a = f(static_cast<double>(t + 1)) / f0;
            a = std::min(a, prev);  // guard monotonicity through clipping
            a = std::min(1.0, std::max(1e-5 + 1e-12, a));
            s.alpha[static_cast<size_t>(t)] = a;
            prev = a;
        }
    }
    s.validate();
    return s;
}

template <class S>
struct LatentImage {
    Tensor<S> data;  // [C, H, W]
    bool is_latent = false;

    void check_finite(const std::string& where) const {
        if (!data.all_finite()) throw NumericalError(where + ": non-finite latent");
    }
};

// One training draw: a batch of latents with per-element timestep and noise.
template <class S>
struct DiffusionBatch {
    std::vector<Tensor<S>> z0;
    std::vector<int> t;
    std::vector<Tensor<S>> eps;
};

template <class S>
Tensor<S> forward_diffuse_tensor(const Tensor<S>& z0, int t, const Tensor<S>& eps,
                                 const NoiseSchedule& sched) {
    if (t < 0 || t >= sched.num_steps)
        throw std::invalid_argument("forward_diffuse: t out of range [0," +
                                    std::to_string(sched.num_steps) + ")");
    if (eps.shape() != z0.shape())
        throw std::invalid_argument("forward_diffuse: eps shape " + shape_str(eps.shape()) +
                                    " != z0 shape " + shape_str(z0.shape()));
    double a = sched.alpha[static_cast<size_t>(t)];
    S sa = static_cast<S>(std::sqrt(a));
    S sn = static_cast<S>(std::sqrt(1.0 - a));
    return add(scale(z0, sa), scale(eps, sn));
}

template <class S>
LatentImage<S> forward_diffuse(const LatentImage<S>& z0, int t, const Tensor<S>& eps,
                               const NoiseSchedule& sched) {
    return LatentImage<S>{forward_diffuse_tensor(z0.data, t, eps, sched), z0.is_latent};
}

// ||eps_true - eps_pred||^2 averaged over every element
template <class S>
Tensor<S> denoising_loss(const Tensor<S>& eps_pred, const Tensor<S>& eps_true) {
    if (eps_pred.shape() != eps_true.shape())
        throw std::invalid_argument("denoising_loss: shape mismatch");
    return mse_loss(eps_pred, eps_true);
}

// The model handle for sampling: condition already bound by the caller.
template <class S>
using DenoiseFn = std::function<Tensor<S>(const Tensor<S>& z_t, int t)>;

template <class S>
struct SampleInit {
    Tensor<S> z;  // a partially noised latent
    int t_index;  // schedule index it was noised to
};

// DDIM (eta = 0) / ancestral (eta = 1) sampling. Deterministic given seed.
template <class S>
Tensor<S> sample(const DenoiseFn<S>& model, const NoiseSchedule& sched, int steps, double eta,
                 uint64_t seed, const Shape& shape, std::optional<SampleInit<S>> init = {}) {
    if (steps < 1 || steps > sched.num_steps)
        throw std::invalid_argument("sample: steps must be in [1, num_steps]");
    if (eta < 0.0 || eta > 1.0) throw std::invalid_argument("sample: eta must be in [0,1]");

    RandomStream rs(seed);
    int t_start = sched.num_steps - 1;
    Tensor<S> z;
    if (init) {
        z = init->z.detached();
        t_start = init->t_index;
        if (t_start < 0 || t_start >= sched.num_steps)
            throw std::invalid_argument("sample: init t_index out of range");
    } else {
        z = Tensor<S>::randn(shape, rs);
    }

    // evenly spaced timestep ladder from t_start down to 0
    std::vector<int> ladder;
    if (steps == 1) {
        ladder.push_back(t_start);
    } else {
        for (int i = 0; i < steps; ++i) {
            int t = static_cast<int>(std::llround(
                static_cast<double>(t_start) * (1.0 - static_cast<double>(i) / (steps - 1))));
            if (ladder.empty() || t < ladder.back()) ladder.push_back(t);
        }
        if (ladder.back() != 0) ladder.push_back(0);
    }

    NoGradGuard ng;
    for (size_t i = 0; i < ladder.size(); ++i) {
        int t = ladder[i];
        double a_t = sched.alpha[static_cast<size_t>(t)];
        double a_prev = (i + 1 < ladder.size()) ? sched.alpha[static_cast<size_t>(ladder[i + 1])] : 1.0;

        Tensor<S> eps_hat = model(z, t);
        if (eps_hat.shape() != z.shape())
            throw std::invalid_argument("sample: model output shape mismatch");

        double sa = std::sqrt(a_t), sn = std::sqrt(1.0 - a_t);
        double sigma = 0.0;
        if (eta > 0.0 && a_prev < 1.0) {
            sigma = eta * std::sqrt((1.0 - a_prev) / (1.0 - a_t)) * std::sqrt(1.0 - a_t / a_prev);
        }
        double dir = std::sqrt(std::max(0.0, 1.0 - a_prev - sigma * sigma));
        double sap = std::sqrt(a_prev);

        Tensor<S> next(z.shape());
        for (int64_t k = 0; k < z.numel(); ++k) {
            double z0_pred = (z.data()[k] - sn * eps_hat.data()[k]) / sa;
            double v = sap * z0_pred + dir * eps_hat.data()[k];
            if (sigma > 0.0) v += sigma * rs.normal();
            next.data()[k] = static_cast<S>(v);
        }
        z = next;
        if (!z.all_finite())
            throw NumericalError("sample: non-finite latent at step index " + std::to_string(i) +
                                 " (t=" + std::to_string(t) + ")");
    }
    return z;
}

}  // namespace mmtryon::diffusion
