#include "marlroute/tensorcore.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace marl::tc {

namespace {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

ConstMatMap cmap(const Tensor& t) { return {t.v.data(), t.rows(), t.cols()}; }
MatMap map_vals(Tensor& t) { return {t.v.data(), t.rows(), t.cols()}; }
MatMap map_grad(Tensor& t) { return {t.g.data(), t.rows(), t.cols()}; }

void require(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

int64_t shape_size(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)) {
    v.assign(shape_size(shape), 0.0);
    g.assign(v.size(), 0.0);
}

void Tensor::zero_grad() { std::fill(g.begin(), g.end(), 0.0); }
void Tensor::fill(double x) { std::fill(v.begin(), v.end(), x); }

Tensor& ParamSet::add(const std::string& name, std::vector<int> shape) {
    require(!tensors_.count(name), "ParamSet: duplicate parameter name");
    order_.push_back(name);
    auto [it, ok] = tensors_.emplace(name, Tensor(std::move(shape)));
    (void)ok;
    return it->second;
}

Tensor& ParamSet::get(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::invalid_argument("ParamSet: unknown parameter " + name);
    return it->second;
}

const Tensor& ParamSet::get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::invalid_argument("ParamSet: unknown parameter " + name);
    return it->second;
}

bool ParamSet::contains(const std::string& name) const { return tensors_.count(name) > 0; }

int64_t ParamSet::total_values() const {
    int64_t n = 0;
    for (const auto& name : order_) n += tensors_.at(name).size();
    return n;
}

void ParamSet::zero_grad() {
    for (const auto& name : order_) tensors_.at(name).zero_grad();
}

void ParamSet::save(std::ostream& out) const {
    out << "checkpoint_version = 1\n";
    out << "num_params = " << order_.size() << "\n";
    char buf[40];
    for (const auto& name : order_) {
        const Tensor& t = tensors_.at(name);
        out << "param " << name << " shape=";
        for (size_t i = 0; i < t.shape.size(); ++i) {
            if (i) out << ",";
            out << t.shape[i];
        }
        out << "\n";
        for (int64_t i = 0; i < t.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%a", t.v[i]);
            out << buf << (i + 1 == t.size() ? "" : " ");
            if ((i + 1) % 8 == 0 && i + 1 != t.size()) out << "\n";
        }
        if (t.size() > 0) out << "\n";
    }
}

void ParamSet::load(std::istream& in) {
    std::string line;
    auto next_line = [&]() {
        if (!std::getline(in, line)) throw LoadError("checkpoint: unexpected end of file");
    };
    next_line();
    if (line.find("checkpoint_version") == std::string::npos)
        throw LoadError("checkpoint: missing version header");
    next_line();
    size_t count = 0;
    if (std::sscanf(line.c_str(), "num_params = %zu", &count) != 1)
        throw LoadError("checkpoint: missing num_params");
    for (size_t p = 0; p < count; ++p) {
        std::string word, name, shape_field;
        in >> word >> name >> shape_field;
        if (word != "param") throw LoadError("checkpoint: expected 'param' record");
        if (shape_field.rfind("shape=", 0) != 0)
            throw LoadError("checkpoint: missing shape for " + name);
        std::vector<int> shape;
        {
            std::istringstream ss(shape_field.substr(6));
            std::string item;
            while (std::getline(ss, item, ',')) shape.push_back(std::stoi(item));
        }
        Tensor* t;
        if (contains(name)) {
            t = &get(name);
            if (t->shape != shape)
                throw LoadError("checkpoint: shape mismatch for " + name);
        } else {
            t = &add(name, shape);
        }
        for (int64_t i = 0; i < t->size(); ++i) {
            std::string tok;
            if (!(in >> tok)) throw LoadError("checkpoint: truncated values for " + name);
            char* end = nullptr;
            t->v[i] = std::strtod(tok.c_str(), &end);
            if (end != tok.c_str() + tok.size())
                throw LoadError("checkpoint: bad value '" + tok + "' in " + name);
        }
    }
}

void ParamSet::save_file(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw LoadError(path + ": cannot open for writing");
    save(out);
}

void ParamSet::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw LoadError(path + ": cannot open");
    load(in);
}

void ParamSet::absorb(const ParamSet& other, const std::string& prefix) {
    for (const auto& name : other.names()) {
        const Tensor& src = other.get(name);
        Tensor& dst = add(prefix + name, src.shape);
        dst.v = src.v;
    }
}

void xavier_uniform(Tensor& t, int fan_in, int fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (auto& x : t.v) x = rng.uniform(-limit, limit);
}

Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
    require(x.shape.size() == 2 && w.shape.size() == 2, "linear: 2-d tensors expected");
    require(x.cols() == w.cols(), "linear: input width != W fan-in");
    require(b.size() == w.rows(), "linear: bias width != W fan-out");
    Tensor y({x.rows(), w.rows()});
    MatMap ym = map_vals(y);
    ym.noalias() = cmap(x) * cmap(w).transpose();
    ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.v.data(), b.size());
    return y;
}

void linear_backward(const Tensor& x, Tensor& w, Tensor& b, const Tensor& dy, Tensor* dx) {
    require(dy.rows() == x.rows() && dy.cols() == w.rows(), "linear_backward: shape mismatch");
    ConstMatMap dym(dy.v.data(), dy.rows(), dy.cols());
    map_grad(w).noalias() += dym.transpose() * cmap(x);
    Eigen::Map<Eigen::RowVectorXd>(b.g.data(), b.size()) += dym.colwise().sum();
    if (dx) {
        require(dx->shape == x.shape, "linear_backward: dx shape mismatch");
        MatMap(dx->v.data(), dx->rows(), dx->cols()).noalias() += dym * cmap(w);
    }
}

void relu_inplace(Tensor& t) {
    for (auto& x : t.v) x = x > 0 ? x : 0.0;
}

Tensor relu(const Tensor& x) {
    Tensor y = x;
    relu_inplace(y);
    return y;
}

void relu_backward(const Tensor& y, const Tensor& dy, Tensor& dx) {
    for (size_t i = 0; i < y.v.size(); ++i) dx.v[i] = y.v[i] > 0 ? dy.v[i] : 0.0;
}

double leaky_relu_scalar(double x, double slope) { return x >= 0 ? x : slope * x; }
double leaky_relu_grad_scalar(double x, double slope) { return x >= 0 ? 1.0 : slope; }

Tensor leaky_relu(const Tensor& x, double slope) {
    Tensor y = x;
    for (auto& v : y.v) v = leaky_relu_scalar(v, slope);
    return y;
}

double elu_scalar(double x) { return x >= 0 ? x : std::expm1(x); }
double elu_grad_from_output(double y) { return y >= 0 ? 1.0 : y + 1.0; }

Tensor elu(const Tensor& x) {
    Tensor y = x;
    for (auto& v : y.v) v = elu_scalar(v);
    return y;
}

void elu_backward(const Tensor& y, const Tensor& dy, Tensor& dx) {
    for (size_t i = 0; i < y.v.size(); ++i) dx.v[i] = elu_grad_from_output(y.v[i]) * dy.v[i];
}

std::vector<double> softmax_masked(std::span<const double> x, const std::vector<uint8_t>* mask) {
    const size_t n = x.size();
    double mx = -std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < n; ++i) {
        if (mask && !(*mask)[i]) continue;
        mx = std::max(mx, x[i]);
    }
    if (!std::isfinite(mx)) throw std::invalid_argument("softmax: all entries masked");
    std::vector<double> y(n, 0.0);
    double denom = 0.0;
    for (size_t i = 0; i < n; ++i) {
        if (mask && !(*mask)[i]) continue;
        y[i] = std::exp(x[i] - mx);
        denom += y[i];
    }
    for (auto& v : y) v /= denom;
    return y;
}

std::vector<double> softmax_backward(std::span<const double> y, std::span<const double> dy) {
    double dot = 0.0;
    for (size_t i = 0; i < y.size(); ++i) dot += y[i] * dy[i];
    std::vector<double> dx(y.size());
    for (size_t i = 0; i < y.size(); ++i) dx[i] = y[i] * (dy[i] - dot);
    return dx;
}

double mse_loss(std::span<const double> pred, std::span<const double> target,
                std::span<double> grad) {
    require(pred.size() == target.size() && grad.size() == pred.size(),
            "mse_loss: size mismatch");
    const double n = static_cast<double>(pred.size());
    double loss = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - target[i];
        loss += d * d;
        grad[i] = 2.0 * d / n;
    }
    return loss / n;
}

void Adam::step(ParamSet& params) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (const auto& name : params.names()) {
        Tensor& t = params.get(name);
        auto& [m, v] = moments_[name];
        if (m.empty()) {
            m.assign(t.v.size(), 0.0);
            v.assign(t.v.size(), 0.0);
        }
        for (size_t i = 0; i < t.v.size(); ++i) {
            const double g = t.g[i];
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            t.v[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
        }
        t.zero_grad();
    }
}

double clip_grad_norm(ParamSet& params, double max_norm) {
    double sq = 0.0;
    for (const auto& name : params.names())
        for (double g : params.get(name).g) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm <= max_norm || norm == 0.0) return 1.0;
    const double scale = max_norm / norm;
    for (const auto& name : params.names())
        for (double& g : params.get(name).g) g *= scale;
    return scale;
}

void polyak_update(ParamSet& target, const ParamSet& online, double tau_mix) {
    for (const auto& name : online.names()) {
        Tensor& dst = target.get(name);
        const Tensor& src = online.get(name);
        for (size_t i = 0; i < dst.v.size(); ++i)
            dst.v[i] = tau_mix * src.v[i] + (1.0 - tau_mix) * dst.v[i];
    }
}

GradCheckResult gradient_check(ParamSet& params,
                               const std::function<double(bool)>& loss, double h) {
    params.zero_grad();
    loss(true);
    // Snapshot analytic grads, then probe each coordinate.
    std::unordered_map<std::string, std::vector<double>> analytic;
    for (const auto& name : params.names()) analytic[name] = params.get(name).g;

    GradCheckResult res;
    for (const auto& name : params.names()) {
        Tensor& t = params.get(name);
        for (size_t i = 0; i < t.v.size(); ++i) {
            const double saved = t.v[i];
            t.v[i] = saved + h;
            const double up = loss(false);
            t.v[i] = saved - h;
            const double down = loss(false);
            t.v[i] = saved;
            const double fd = (up - down) / (2.0 * h);
            const double an = analytic[name][i];
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-3});
            const double rel = std::abs(fd - an) / denom;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_param = name + "[" + std::to_string(i) + "]";
            }
        }
    }
    params.zero_grad();
    return res;
}

}  // namespace marl::tc
