#pragma once

// Named parameter/gradient registry with a fixed (insertion) order. The
// optimizer, checkpointing and the gradient checker all iterate this order,
// which is set once by model construction and is therefore reproducible.

#include <string>
#include <unordered_map>
#include <vector>

#include "gecko/common.hpp"
#include "gecko/tensor.hpp"

namespace gecko {

template <typename T>
struct ParamStore {
    std::vector<std::string> names;
    std::vector<Tensor<T>> value;
    std::vector<Tensor<T>> grad;
    std::unordered_map<std::string, size_t> index;

    size_t add(const std::string& name, std::vector<size_t> shape) {
        GECKO_CHECK(index.find(name) == index.end(), "duplicate parameter " << name);
        index[name] = names.size();
        names.push_back(name);
        value.emplace_back(shape);
        grad.emplace_back(shape);
        return names.size() - 1;
    }

    size_t count() const { return names.size(); }

    size_t scalar_count() const {
        size_t n = 0;
        for (const auto& t : value) n += t.size();
        return n;
    }

    Tensor<T>& operator[](const std::string& name) {
        auto it = index.find(name);
        GECKO_CHECK(it != index.end(), "unknown parameter " << name);
        return value[it->second];
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = index.find(name);
        GECKO_CHECK(it != index.end(), "unknown parameter " << name);
        return value[it->second];
    }
    Tensor<T>& grad_of(const std::string& name) {
        auto it = index.find(name);
        GECKO_CHECK(it != index.end(), "unknown parameter " << name);
        return grad[it->second];
    }

    void zero_grad() {
        for (auto& g : grad) std::fill(g.data.begin(), g.data.end(), T(0));
    }

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (size_t i = 0; i < names.size(); ++i) {
            out.add(names[i], value[i].shape);
            for (size_t j = 0; j < value[i].size(); ++j)
                out.value[i].data[j] = static_cast<U>(value[i].data[j]);
        }
        return out;
    }
};

}  // namespace gecko
