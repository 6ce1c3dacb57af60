#pragma once

#include <atomic>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "monelab/errors.hpp"

namespace monelab {

enum class Dtype { f32, f64 };

inline const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

inline Dtype parse_dtype(const std::string& s) {
    if (s == "f32") return Dtype::f32;
    if (s == "f64") return Dtype::f64;
    throw ConfigError("unknown dtype '" + s + "' (expected f32 or f64)");
}

// Process-wide accounting of live tensor bytes. Feeds the bench's
// peak-working-set estimate; intentionally tracks our own allocations
// rather than OS RSS so reports are portable.
struct MemTracker {
    static std::atomic<int64_t>& live() {
        static std::atomic<int64_t> v{0};
        return v;
    }
    static std::atomic<int64_t>& peak() {
        static std::atomic<int64_t> v{0};
        return v;
    }
    static void add(int64_t bytes) {
        int64_t now = live().fetch_add(bytes) + bytes;
        int64_t p = peak().load();
        while (now > p && !peak().compare_exchange_weak(p, now)) {
        }
    }
    static void sub(int64_t bytes) { live().fetch_sub(bytes); }
    static int64_t live_bytes() { return live().load(); }
    static int64_t peak_bytes() { return peak().load(); }
    static void reset_peak() { peak().store(live().load()); }
};

// Dense row-major numeric array. Shape is fixed at construction; the data
// vector is never grown in place.
template <typename T>
class TensorT {
public:
    static_assert(std::is_floating_point_v<T>);

    TensorT() = default;

    explicit TensorT(std::vector<int64_t> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(numel_of(shape_)), T(0));
        MemTracker::add(bytes());
    }

    TensorT(std::vector<int64_t> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (numel_of(shape_) != static_cast<int64_t>(data_.size()))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str());
        MemTracker::add(bytes());
    }

    TensorT(const TensorT& o) : shape_(o.shape_), data_(o.data_) { MemTracker::add(bytes()); }

    TensorT(TensorT&& o) noexcept : shape_(std::move(o.shape_)), data_(std::move(o.data_)) {
        o.shape_.clear();
        o.data_.clear();
    }

    TensorT& operator=(const TensorT& o) {
        if (this != &o) {
            MemTracker::sub(bytes());
            shape_ = o.shape_;
            data_ = o.data_;
            MemTracker::add(bytes());
        }
        return *this;
    }

    TensorT& operator=(TensorT&& o) noexcept {
        if (this != &o) {
            MemTracker::sub(bytes());
            shape_ = std::move(o.shape_);
            data_ = std::move(o.data_);
            o.shape_.clear();
            o.data_.clear();
        }
        return *this;
    }

    ~TensorT() { MemTracker::sub(bytes()); }

    static TensorT zeros(std::vector<int64_t> shape) { return TensorT(std::move(shape)); }

    static TensorT full(std::vector<int64_t> shape, T value) {
        TensorT t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    static TensorT identity(int64_t n) {
        TensorT t({n, n});
        for (int64_t i = 0; i < n; ++i) t.data_[static_cast<size_t>(i * n + i)] = T(1);
        return t;
    }

    const std::vector<int64_t>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }
    int64_t bytes() const { return static_cast<int64_t>(data_.size() * sizeof(T)); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    T operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // 2-D accessors; tensors of higher rank index through data() directly.
    T& at(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * dim(1) + j)]; }
    T at(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * dim(1) + j)]; }

    int64_t rows() const { return rank() == 2 ? dim(0) : (rank() == 1 ? 1 : 0); }
    int64_t cols() const { return rank() == 2 ? dim(1) : (rank() == 1 ? dim(0) : 0); }

    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
        os << "]";
        return os.str();
    }

    static int64_t numel_of(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t d : shape) {
            if (d < 0) throw ShapeError("negative dimension in tensor shape");
            n *= d;
        }
        return n;
    }

private:
    std::vector<int64_t> shape_;
    std::vector<T> data_;
};

using Tensor32 = TensorT<float>;
using Tensor64 = TensorT<double>;

}  // namespace monelab
