#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "marlroute/common.hpp"

namespace marl::tc {

struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;  // row-major values
    std::vector<double> g;  // gradient, same length as v

    Tensor() = default;
    explicit Tensor(std::vector<int> s);

    int64_t size() const { return static_cast<int64_t>(v.size()); }
    int rows() const { return shape.at(0); }
    int cols() const { return shape.at(1); }
    double& at(int i, int j) { return v[static_cast<size_t>(i) * cols() + j]; }
    double at(int i, int j) const { return v[static_cast<size_t>(i) * cols() + j]; }
    void zero_grad();
    void fill(double x);
};

int64_t shape_size(const std::vector<int>& shape);

// Named parameters with deterministic (insertion) iteration order.
class ParamSet {
public:
    Tensor& add(const std::string& name, std::vector<int> shape);
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    bool contains(const std::string& name) const;

    const std::vector<std::string>& names() const { return order_; }
    size_t size() const { return order_.size(); }
    int64_t total_values() const;

    void zero_grad();

    void save(std::ostream& out) const;
    void load(std::istream& in);
    void save_file(const std::string& path) const;
    void load_file(const std::string& path);

    // Appends every tensor of `other` under "<prefix><name>".
    void absorb(const ParamSet& other, const std::string& prefix);

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Tensor> tensors_;
};

void xavier_uniform(Tensor& t, int fan_in, int fan_out, Rng& rng);

// ---- batched layer primitives (X is [B, in], W is [out, in], b is [out]) ----

Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& b);
// Accumulates into w.g / b.g; returns dL/dX when `dx` non-null.
void linear_backward(const Tensor& x, Tensor& w, Tensor& b, const Tensor& dy, Tensor* dx);

void relu_inplace(Tensor& t);
Tensor relu(const Tensor& x);
// dpre = dy masked by activation output (y > 0).
void relu_backward(const Tensor& y, const Tensor& dy, Tensor& dx);

double leaky_relu_scalar(double x, double slope);
double leaky_relu_grad_scalar(double x, double slope);
Tensor leaky_relu(const Tensor& x, double slope);

double elu_scalar(double x);
double elu_grad_from_output(double y);
Tensor elu(const Tensor& x);
void elu_backward(const Tensor& y, const Tensor& dy, Tensor& dx);

// Masked softmax over a flat vector; masked entries are exactly zero.
// Throws std::invalid_argument when every entry is masked.
std::vector<double> softmax_masked(std::span<const double> x, const std::vector<uint8_t>* mask);
// dx_j = y_j * (dy_j - sum_k y_k dy_k), restricted to unmasked entries.
std::vector<double> softmax_backward(std::span<const double> y, std::span<const double> dy);

// Mean squared error; writes dL/dpred into grad (overwrites).
double mse_loss(std::span<const double> pred, std::span<const double> target,
                std::span<double> grad);

struct AdamConfig {
    double lr = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-4;
};

class Adam {
public:
    Adam() = default;
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    void step(ParamSet& params);
    int64_t step_count() const { return step_; }
    const AdamConfig& config() const { return cfg_; }

private:
    AdamConfig cfg_;
    int64_t step_ = 0;
    std::unordered_map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

// Scales all gradients so the global L2 norm is <= max_norm; returns the scale.
double clip_grad_norm(ParamSet& params, double max_norm);

// target <- tau_mix * online + (1 - tau_mix) * target, where tau_mix is the
// online fraction. Pass tau directly for the tau convention, 1 - polyak for
// the polyak convention.
void polyak_update(ParamSet& target, const ParamSet& online, double tau_mix);

// ---- gradient checking ----

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    bool ok(double tol) const { return max_rel_err < tol; }
};

// Central finite differences of `loss` w.r.t. every parameter value, compared
// against the gradients `loss` left in the ParamSet. `loss` must populate
// grads when `compute_grads` is true and must be deterministic.
GradCheckResult gradient_check(ParamSet& params,
                               const std::function<double(bool compute_grads)>& loss,
                               double h = 1e-5);

}  // namespace marl::tc
