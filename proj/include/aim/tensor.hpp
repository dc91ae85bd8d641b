// tensor.hpp — a minimal dense tensor.
//
// Row-major, contiguous, up to rank 4 in practice (B, C, H, W). Storage is a
// 64-byte aligned shared buffer: copying a Tensor shares the buffer (cheap,
// torch-like), clone() deep-copies. Everything compute-heavy lives in
// kernels/ops; this class is shape bookkeeping plus raw data access.

#ifndef AIM_TENSOR_HPP
#define AIM_TENSOR_HPP

#include <cstdlib>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "aim/common.hpp"

namespace aim {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

template <typename T>
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)), size_(numel(shape_)) {
        for (int64_t d : shape_) {
            AIM_CHECK(d > 0, DimError, "Tensor: non-positive dim in " << shape_str(shape_));
        }
        T* raw = static_cast<T*>(std::aligned_alloc(64, size_t(aligned_bytes(size_))));
        AIM_CHECK(raw != nullptr, Error, "Tensor: allocation of " << size_ << " elements failed");
        data_ = std::shared_ptr<T[]>(raw, [](T* p) { std::free(p); });
        std::memset(raw, 0, size_t(size_) * sizeof(T));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        for (int64_t i = 0; i < t.size_; ++i) t.data_[i] = value;
        return t;
    }

    static Tensor from(Shape shape, std::initializer_list<T> vals) {
        Tensor t(std::move(shape));
        AIM_CHECK(int64_t(vals.size()) == t.size_, DimError,
                  "Tensor::from: " << vals.size() << " values for shape " << shape_str(t.shape_));
        int64_t i = 0;
        for (T v : vals) t.data_[i++] = v;
        return t;
    }

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int rank() const { return int(shape_.size()); }
    int64_t dim(int i) const { return shape_[size_t(i)]; }
    int64_t size() const { return size_; }

    T* data() { return data_.get(); }
    const T* data() const { return data_.get(); }

    T& operator[](int64_t i) { return data_[i]; }
    const T& operator[](int64_t i) const { return data_[i]; }

    // Convenience accessors for tests and glue code (not for hot loops).
    T& at(int64_t b, int64_t c, int64_t h, int64_t w) {
        return data_[((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    const T& at(int64_t b, int64_t c, int64_t h, int64_t w) const {
        return data_[((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    T& at(int64_t c, int64_t h, int64_t w) {
        return data_[(c * shape_[1] + h) * shape_[2] + w];
    }
    const T& at(int64_t c, int64_t h, int64_t w) const {
        return data_[(c * shape_[1] + h) * shape_[2] + w];
    }
    T& at(int64_t a, int64_t b) { return data_[a * shape_[1] + b]; }
    const T& at(int64_t a, int64_t b) const { return data_[a * shape_[1] + b]; }

    Tensor clone() const {
        Tensor t(shape_);
        std::memcpy(t.data(), data(), size_t(size_) * sizeof(T));
        return t;
    }

    // Same buffer, new shape with identical element count.
    Tensor reshaped(Shape shape) const {
        AIM_CHECK(numel(shape) == size_, DimError,
                  "reshape " << shape_str(shape_) << " -> " << shape_str(shape)
                             << " changes element count");
        Tensor t;
        t.shape_ = std::move(shape);
        t.size_ = size_;
        t.data_ = data_;
        return t;
    }

    void fill(T value) {
        for (int64_t i = 0; i < size_; ++i) data_[i] = value;
    }

    void zero() { std::memset(data(), 0, size_t(size_) * sizeof(T)); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> t(shape_);
        for (int64_t i = 0; i < size_; ++i) t[i] = U(data_[i]);
        return t;
    }

  private:
    static int64_t aligned_bytes(int64_t n) {
        int64_t b = n * int64_t(sizeof(T));
        return (b + 63) / 64 * 64;
    }

    Shape shape_;
    int64_t size_ = 0;
    std::shared_ptr<T[]> data_;
};

template <typename T>
void check_shape(const Tensor<T>& t, const Shape& want, const char* where) {
    AIM_CHECK(t.shape() == want, DimError,
              where << ": expected shape " << shape_str(want) << ", got " << shape_str(t.shape()));
}

template <typename T>
void check_rank(const Tensor<T>& t, int rank, const char* where) {
    AIM_CHECK(t.rank() == rank, DimError,
              where << ": expected rank " << rank << ", got shape " << shape_str(t.shape()));
}

}  // namespace aim

#endif  // AIM_TENSOR_HPP
