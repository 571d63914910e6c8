#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "gtrans/errors.hpp"

namespace gtrans {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

template <typename Real>
struct TensorStorage {
    Shape shape;
    std::shared_ptr<std::vector<Real>> data;
    std::shared_ptr<std::vector<Real>> grad;  // allocated iff the tensor participates in autodiff
    bool requires_grad = false;
    std::int64_t node_id = -1;   // identity on the tape that last touched this tensor
    std::uint64_t tape_epoch = 0;
};

// Value-like handle to a dense row-major array. Copies share the underlying
// buffer; ops produce fresh tensors. Gradients live next to the data and
// accumulate until explicitly zeroed.
template <typename Real>
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(Shape shape, Real fill = Real(0)) {
        if (shape.empty()) throw DimensionError("tensor rank must be >= 1");
        for (int d : shape)
            if (d <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
        s_ = std::make_shared<TensorStorage<Real>>();
        s_->shape = std::move(shape);
        s_->data = std::make_shared<std::vector<Real>>(shape_numel(s_->shape), fill);
    }

    Tensor(Shape shape, std::vector<Real> values) {
        if (shape.empty()) throw DimensionError("tensor rank must be >= 1");
        if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
            throw DimensionError("value count " + std::to_string(values.size()) +
                                 " does not fill shape " + shape_str(shape));
        s_ = std::make_shared<TensorStorage<Real>>();
        s_->shape = std::move(shape);
        s_->data = std::make_shared<std::vector<Real>>(std::move(values));
    }

    static Tensor scalar(Real v) { return Tensor({1}, std::vector<Real>{v}); }

    static Tensor row(std::initializer_list<Real> values) {
        return Tensor({static_cast<int>(values.size())}, std::vector<Real>(values));
    }

    bool defined() const { return s_ != nullptr; }
    const Shape& shape() const { return s_->shape; }
    int dim(int i) const { return s_->shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(s_->shape.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(s_->data->size()); }

    Real* data() { return s_->data->data(); }
    const Real* data() const { return s_->data->data(); }
    std::vector<Real>& vec() { return *s_->data; }
    const std::vector<Real>& vec() const { return *s_->data; }

    Real& at(std::int64_t i) { return (*s_->data)[static_cast<std::size_t>(i)]; }
    Real at(std::int64_t i) const { return (*s_->data)[static_cast<std::size_t>(i)]; }

    bool requires_grad() const { return s_->requires_grad; }

    // Marks a leaf tensor as trainable and allocates its gradient buffer.
    Tensor& set_requires_grad(bool on = true) {
        s_->requires_grad = on;
        if (on) ensure_grad();
        return *this;
    }

    bool has_grad() const { return s_->grad != nullptr; }
    std::vector<Real>& grad() {
        ensure_grad();
        return *s_->grad;
    }
    const std::vector<Real>& grad() const {
        if (!s_->grad) throw Error("gradient buffer was never allocated");
        return *s_->grad;
    }

    void ensure_grad() {
        if (!s_->grad) s_->grad = std::make_shared<std::vector<Real>>(s_->data->size(), Real(0));
    }

    void zero_grad() {
        if (s_->grad) std::fill(s_->grad->begin(), s_->grad->end(), Real(0));
    }

    std::int64_t node_id() const { return s_->node_id; }

    // Same buffer under a different shape. Gradients alias as well, so views
    // need no tape entry.
    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != numel())
            throw DimensionError("cannot reshape " + shape_str(s_->shape) + " to " + shape_str(shape));
        Tensor t;
        t.s_ = std::make_shared<TensorStorage<Real>>(*s_);
        t.s_->shape = std::move(shape);
        return t;
    }

    Tensor clone() const {
        Tensor t(s_->shape, *s_->data);
        return t;
    }

    bool same_storage(const Tensor& other) const { return s_->data == other.s_->data; }

    std::shared_ptr<TensorStorage<Real>>& storage() { return s_; }
    const std::shared_ptr<TensorStorage<Real>>& storage() const { return s_; }

  private:
    std::shared_ptr<TensorStorage<Real>> s_;

    template <typename R>
    friend class Tape;
};

// Reverse-mode tape. Forward ops append themselves in execution order, which
// is a topological order by construction; backward() replays the list once in
// reverse. Op-output gradients are scratch (cleared per backward pass), leaf
// gradients accumulate across passes until zeroed.
template <typename Real>
class Tape {
  public:
    struct Record {
        const char* name;
        std::vector<std::int64_t> inputs;
        std::int64_t output;
        std::function<void()> backward;
    };

    Tape() : epoch_(next_epoch()++) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::int64_t touch(Tensor<Real>& t) {
        auto& s = *t.s_;
        if (s.tape_epoch != epoch_ || s.node_id < 0) {
            s.tape_epoch = epoch_;
            s.node_id = next_id_++;
        }
        return s.node_id;
    }

    // Registers an op. `inputs` are already-touched input ids.
    void record(const char* name, std::vector<std::int64_t> inputs, Tensor<Real>& out,
                std::function<void()> backward) {
        out.s_->requires_grad = true;
        out.ensure_grad();
        std::int64_t out_id = touch(out);
        records_.push_back(Record{name, std::move(inputs), out_id, std::move(backward)});
        outputs_.push_back(out.s_);
    }

    std::size_t size() const { return records_.size(); }
    const std::vector<Record>& records() const { return records_; }

    // Runs every recorded backward rule exactly once, newest first. Seeds
    // d(loss)/d(loss) = 1. Leaf gradients accumulate; calling twice on the
    // same tape doubles them.
    void backward(Tensor<Real>& loss) {
        if (loss.numel() != 1)
            throw ValueError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
        for (auto& s : outputs_)
            if (s->grad) std::fill(s->grad->begin(), s->grad->end(), Real(0));
        loss.ensure_grad();
        loss.grad()[0] += Real(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward();
        ++backward_runs_;
    }

    int backward_runs() const { return backward_runs_; }
    std::uint64_t epoch() const { return epoch_; }

  private:
    static std::atomic<std::uint64_t>& next_epoch() {
        static std::atomic<std::uint64_t> e{1};
        return e;
    }

    std::uint64_t epoch_;
    std::int64_t next_id_ = 0;
    int backward_runs_ = 0;
    std::vector<Record> records_;
    std::vector<std::shared_ptr<TensorStorage<Real>>> outputs_;
};

template <typename Real>
inline void check_finite(const Tensor<Real>& t, const char* op) {
    for (Real v : t.vec())
        if (!std::isfinite(static_cast<double>(v)))
            throw NonFiniteError(std::string("non-finite value produced by ") + op);
}

}  // namespace gtrans
