#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dualshot {

// N, C, H, W.  Every tensor in the network is rank 4; point sets are laid
// out as [N, D, 1, P] so per-point MLPs are 1x1 convolutions.
using Shape = std::array<int, 4>;

inline std::size_t numel(const Shape& s) {
    return static_cast<std::size_t>(s[0]) * s[1] * s[2] * s[3];
}

std::string to_string(const Shape& s);

class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

template <class T>
struct Tensor {
    Shape shape{0, 0, 0, 0};
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(s), data(numel(s), fill) {}

    int n() const { return shape[0]; }
    int c() const { return shape[1]; }
    int h() const { return shape[2]; }
    int w() const { return shape[3]; }
    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    std::size_t index(int in, int ic, int iy, int ix) const {
        return ((static_cast<std::size_t>(in) * shape[1] + ic) * shape[2] + iy) * shape[3] + ix;
    }
    T& at(int in, int ic, int iy, int ix) { return data[index(in, ic, iy, ix)]; }
    const T& at(int in, int ic, int iy, int ix) const { return data[index(in, ic, iy, ix)]; }

    // Contiguous H*W plane of one channel.
    T* plane(int in, int ic) { return data.data() + index(in, ic, 0, 0); }
    const T* plane(int in, int ic) const { return data.data() + index(in, ic, 0, 0); }

    std::span<T> span() { return data; }
    std::span<const T> span() const { return data; }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out(shape);
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

}  // namespace dualshot
