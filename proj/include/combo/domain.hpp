#pragma once

// Shared domain types and numeric contract helpers.
//
// Channel layout for class logits (fixed across the whole lab):
//   column 0           reserved, never active, never a ClassId
//   columns 1..Cmax    real classes, ClassId == column index
//   column  Cmax+1     no-obj, always active, last
// Channels for classes not yet introduced are masked to -inf before any
// softmax. A ClassId is always in [1, Cmax].

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "combo/tensor.hpp"

namespace combo {

using ClassId = int;  // 1-based; 0 is the reserved logit column, never a class

struct SegmentLabel {
    ClassId class_id = 0;
    Tensor<std::uint8_t> mask;  // [H,W], values 0/1, at least one positive pixel
    int instance_id = 0;        // unique within one image
    bool is_pseudo = false;

    std::size_t area() const {
        std::size_t a = 0;
        for (auto v : mask.data) a += v;
        return a;
    }
};

struct ImageSample {
    Tensor<float> image;  // [3,H,W], values in [0,1]
    std::vector<SegmentLabel> labels;
    std::string sample_id;

    std::size_t height() const { return image.dim(1); }
    std::size_t width() const { return image.dim(2); }
};

struct ProbDistribution {
    std::vector<double> probs;
};

// Per-image network output. class_logits carry the full preallocated channel
// axis with inactive channels already at -inf.
struct ModelOutput {
    std::vector<Tensor<float>> queries_per_layer;  // L entries, each [N,D]
    Tensor<float> class_logits;                    // [N, Cmax+2]
    Tensor<float> mask_logits;                     // [N,H,W]
    std::vector<bool> refined_flags;               // length N
};

// ------------------------------------------------------------ channel layout

struct ChannelLayout {
    int max_classes = 0;  // Cmax

    int channels() const { return max_classes + 2; }
    int no_obj() const { return max_classes + 1; }
    bool is_real_class(int channel) const { return channel >= 1 && channel <= max_classes; }

    // Active mask given the set of introduced classes.
    std::vector<bool> active_mask(const std::vector<ClassId>& introduced) const {
        std::vector<bool> m(channels(), false);
        for (ClassId c : introduced) {
            if (c < 1 || c > max_classes) throw std::invalid_argument("class id out of range");
            m[c] = true;
        }
        m[no_obj()] = true;
        return m;
    }
};

// ------------------------------------------------------------------- softmax

// Exp-normalized distribution. -inf entries are masked channels and map to
// exactly zero. Throws "empty support" when every entry is masked.
inline ProbDistribution softmax(const std::vector<double>& logits) {
    const double neg_inf = -std::numeric_limits<double>::infinity();
    double mx = neg_inf;
    for (double z : logits) {
        if (z != neg_inf && !std::isfinite(z)) throw std::domain_error("softmax: non-finite logit");
        mx = std::max(mx, z);
    }
    if (mx == neg_inf) throw std::domain_error("softmax: empty support");
    ProbDistribution out;
    out.probs.resize(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        double e = (logits[i] == neg_inf) ? 0.0 : std::exp(logits[i] - mx);
        out.probs[i] = e;
        sum += e;
    }
    for (double& p : out.probs) p /= sum;
    return out;
}

// Row-wise value-level softmax over a logits matrix (same masking rules),
// computed in double regardless of the logit storage type.
template <class T>
Tensor<double> softmax_rows_value(const Tensor<T>& logits) {
    Tensor<double> out({logits.rows(), logits.cols()});
    std::vector<double> row(logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        for (std::size_t j = 0; j < logits.cols(); ++j) row[j] = static_cast<double>(logits.at(i, j));
        ProbDistribution d = softmax(row);
        for (std::size_t j = 0; j < logits.cols(); ++j) out.at(i, j) = d.probs[j];
    }
    return out;
}

// ---------------------------------------------------------------- grad_check

// Max over parameters of |analytic - central difference| / max(1, |analytic|).
// `f` evaluates the scalar function at the given parameter vector; `analytic`
// is the gradient under test at `params`.
inline double grad_check(const std::function<double(const std::vector<double>&)>& f,
                         const std::vector<double>& params,
                         const std::vector<double>& analytic, double epsilon) {
    if (!(epsilon > 0.0 && epsilon <= 1e-2)) throw std::invalid_argument("grad_check: bad epsilon");
    if (analytic.size() != params.size())
        throw std::invalid_argument("grad_check: gradient size mismatch");
    double f0 = f(params);
    if (!std::isfinite(f0)) throw std::domain_error("grad_check: non-finite function value");
    double worst = 0.0;
    std::vector<double> p = params;
    for (std::size_t i = 0; i < p.size(); ++i) {
        double keep = p[i];
        p[i] = keep + epsilon;
        double fp = f(p);
        p[i] = keep - epsilon;
        double fm = f(p);
        p[i] = keep;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::domain_error("grad_check: non-finite function value");
        double numeric = (fp - fm) / (2.0 * epsilon);
        double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace combo
