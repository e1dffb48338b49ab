#pragma once

#include <cstdint>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace moat {

using Shape = std::vector<int64_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

struct DimError : std::runtime_error {
    explicit DimError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dense row-major tensor, rank <= 4. Image tensors are NHWC with the channel
// axis fastest-varying: element (n,h,w,c) lives at ((n*H+h)*W+w)*C+c.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        check_shape(shape_);
        data_.assign(static_cast<size_t>(shape_numel(shape_)), T(0));
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape(shape_);
        if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
            throw DimError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T v) {
        Tensor t(std::move(shape));
        for (T& x : t.data_) x = v;
        return t;
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // NHWC accessor for rank-4 tensors.
    T& at(int64_t n, int64_t h, int64_t w, int64_t c) { return data_[static_cast<size_t>(offset(n, h, w, c))]; }
    const T& at(int64_t n, int64_t h, int64_t w, int64_t c) const { return data_[static_cast<size_t>(offset(n, h, w, c))]; }

    int64_t offset(int64_t n, int64_t h, int64_t w, int64_t c) const {
        return ((n * shape_[1] + h) * shape_[2] + w) * shape_[3] + c;
    }

    // Rank-2 accessor.
    T& at2(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
    const T& at2(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            throw DimError("reshape " + shape_str(shape_) + " -> " + shape_str(s) + ": element count differs");
        return Tensor(std::move(s), data_);
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> d(data_.size());
        for (size_t i = 0; i < data_.size(); ++i) d[i] = static_cast<U>(data_[i]);
        return Tensor<U>(shape_, std::move(d));
    }

private:
    static void check_shape(const Shape& s) {
        if (s.size() > 4) throw DimError("rank " + std::to_string(s.size()) + " exceeds 4");
        for (int64_t d : s)
            if (d < 1) throw DimError("shape extent must be >= 1, got " + shape_str(s));
    }

    Shape shape_;
    std::vector<T> data_;
};

// Splits [0,n) into contiguous chunks, one worker per chunk. Each index is
// handled entirely by one worker so float accumulation order is fixed and
// results are identical for any thread count.
inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    unsigned hw = std::thread::hardware_concurrency();
    int64_t workers = static_cast<int64_t>(hw ? hw : 1);
    if (n < 4096 || workers <= 1) {
        fn(0, n);
        return;
    }
    if (workers > n) workers = n;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers - 1));
    int64_t chunk = (n + workers - 1) / workers;
    for (int64_t w = 1; w < workers; ++w) {
        int64_t lo = w * chunk, hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back(fn, lo, hi);
    }
    fn(0, std::min(n, chunk));
    for (auto& t : pool) t.join();
}

}  // namespace moat
