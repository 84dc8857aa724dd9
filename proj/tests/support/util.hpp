#pragma once

#include <vector>

#include "rpnet/rng.hpp"
#include "rpnet/tensor.hpp"

namespace testutil {

inline rpnet::Tensor rand_tensor(std::vector<int> shape, rpnet::Rng& rng, double lo = -1.0,
                                 double hi = 1.0, bool requires_grad = false) {
    std::size_t n = 1;
    for (int d : shape) n *= std::size_t(d);
    std::vector<rpnet::Real> data(n);
    for (auto& v : data) v = rpnet::Real(rpnet::uniform_in(rng, lo, hi));
    return rpnet::Tensor::from(std::move(shape), std::move(data), requires_grad);
}

}  // namespace testutil
