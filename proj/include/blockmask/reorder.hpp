#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <vector>

#include "blockmask/mask.hpp"
#include "blockmask/matrix.hpp"

// Reverse Cuthill-McKee over the mask's sparsity pattern. Reordering the
// tokens concentrates mask ones near the diagonal, which raises the share
// of all-zero (skippable) blocks. Every tie in the classical algorithm is
// pinned so the permutation is a pure function of the graph.

namespace blockmask {

/// Undirected sparsity pattern of a mask: edge i-j iff mask(i,j) or
/// mask(j,i) is set, self-loops dropped. Neighbor lists are sorted by
/// node index.
struct SparsityGraph {
    std::size_t n_nodes = 0;
    std::vector<std::vector<std::uint32_t>> adjacency;

    std::size_t degree(std::size_t i) const { return adjacency[i].size(); }
};

inline SparsityGraph build_graph(const Mask& mask) {
    const std::size_t n = mask.size();
    SparsityGraph g{n, std::vector<std::vector<std::uint32_t>>(n)};
    for (std::size_t i = 0; i < n; ++i) {
        const auto words = mask.row_words(i);
        for (std::size_t w = 0; w < words.size(); ++w) {
            std::uint64_t bits = words[w];
            while (bits) {
                const std::size_t j = w * 64 + std::countr_zero(bits);
                bits &= bits - 1;
                if (j == i) continue;
                g.adjacency[i].push_back(static_cast<std::uint32_t>(j));
                g.adjacency[j].push_back(static_cast<std::uint32_t>(i));
            }
        }
    }
    for (auto& adj : g.adjacency) {
        std::sort(adj.begin(), adj.end());
        adj.erase(std::unique(adj.begin(), adj.end()), adj.end());
    }
    return g;
}

/// Token relabeling. forward maps a new index to the old one; inverse is
/// its inverse, old index to new.
struct Permutation {
    std::vector<std::uint32_t> forward;
    std::vector<std::uint32_t> inverse;

    static Permutation from_forward(std::vector<std::uint32_t> fwd) {
        Permutation p;
        p.inverse.assign(fwd.size(), 0);
        std::vector<char> seen(fwd.size(), 0);
        for (std::size_t a = 0; a < fwd.size(); ++a) {
            require(fwd[a] < fwd.size() && !seen[fwd[a]], "forward map is not a bijection");
            seen[fwd[a]] = 1;
            p.inverse[fwd[a]] = static_cast<std::uint32_t>(a);
        }
        p.forward = std::move(fwd);
        return p;
    }

    static Permutation identity(std::size_t n) {
        std::vector<std::uint32_t> fwd(n);
        for (std::size_t i = 0; i < n; ++i) fwd[i] = static_cast<std::uint32_t>(i);
        return from_forward(std::move(fwd));
    }

    std::size_t size() const { return forward.size(); }

    friend bool operator==(const Permutation&, const Permutation&) = default;
};

/// Cuthill-McKee BFS, then the whole ordering reversed. Deterministic:
/// components are taken in ascending order of their smallest node index,
/// each is started at its minimum-degree node (ties by index), and BFS
/// neighbors are enqueued by ascending (degree, index).
inline Permutation rcm_order(const SparsityGraph& g) {
    const std::size_t n = g.n_nodes;
    std::vector<std::uint32_t> order;
    order.reserve(n);
    std::vector<char> visited(n, 0);
    std::vector<std::uint32_t> component;
    std::vector<std::uint32_t> frontier;

    const auto by_degree_then_index = [&](std::uint32_t a, std::uint32_t b) {
        if (g.degree(a) != g.degree(b)) return g.degree(a) < g.degree(b);
        return a < b;
    };

    for (std::size_t seed = 0; seed < n; ++seed) {
        if (visited[seed]) continue;

        // Collect the component to find its minimum-degree start node.
        component.assign(1, static_cast<std::uint32_t>(seed));
        visited[seed] = 1;
        for (std::size_t head = 0; head < component.size(); ++head)
            for (std::uint32_t nb : g.adjacency[component[head]])
                if (!visited[nb]) {
                    visited[nb] = 1;
                    component.push_back(nb);
                }
        std::uint32_t start = component.front();
        for (std::uint32_t node : component)
            if (by_degree_then_index(node, start)) start = node;

        for (std::uint32_t node : component) visited[node] = 0;  // reset for the BFS proper

        const std::size_t bfs_begin = order.size();
        order.push_back(start);
        visited[start] = 1;
        for (std::size_t head = bfs_begin; head < order.size(); ++head) {
            frontier.clear();
            for (std::uint32_t nb : g.adjacency[order[head]])
                if (!visited[nb]) {
                    visited[nb] = 1;
                    frontier.push_back(nb);
                }
            std::sort(frontier.begin(), frontier.end(), by_degree_then_index);
            order.insert(order.end(), frontier.begin(), frontier.end());
        }
    }

    std::reverse(order.begin(), order.end());
    return Permutation::from_forward(std::move(order));
}

/// Max |i - j| over set mask entries; 0 for diagonal or empty masks.
/// Symmetrizing cannot change it, so the mask is scanned as-is.
inline std::size_t bandwidth(const Mask& mask) {
    std::size_t bw = 0;
    const std::size_t n = mask.size();
    for (std::size_t i = 0; i < n; ++i) {
        const auto words = mask.row_words(i);
        std::size_t first = n, last = 0;
        for (std::size_t w = 0; w < words.size(); ++w) {
            if (!words[w]) continue;
            first = std::min(first, w * 64 + std::countr_zero(words[w]));
            last = std::max(last, w * 64 + 63 - std::countl_zero(words[w]));
        }
        if (first == n) continue;  // empty row
        if (first < i) bw = std::max(bw, i - first);
        if (last > i) bw = std::max(bw, last - i);
    }
    return bw;
}

/// mask'(a, b) = mask(forward[a], forward[b])
inline Mask permute_mask(const Mask& mask, const Permutation& perm) {
    require(perm.size() == mask.size(), "permutation length must match mask size");
    Mask out(mask.size());
    for (std::size_t a = 0; a < mask.size(); ++a)
        for (std::size_t b = 0; b < mask.size(); ++b)
            if (mask.get(perm.forward[a], perm.forward[b])) out.set(a, b, true);
    return out;
}

/// Row a of the result is row forward[a] of the input (token relabeling
/// applied to q/k/v).
template <typename T>
Matrix<T> permute_rows(const Matrix<T>& m, const Permutation& perm) {
    require(perm.size() == m.rows(), "permutation length must match row count");
    Matrix<T> out(m.rows(), m.cols());
    for (std::size_t a = 0; a < m.rows(); ++a) {
        const auto src = m.row(perm.forward[a]);
        std::copy(src.begin(), src.end(), out.row(a).begin());
    }
    return out;
}

/// Undo permute_rows: row forward[a] of the result is row a of the input.
/// Applied to attention outputs computed in the permuted token order.
template <typename T>
Matrix<T> unpermute_rows(const Matrix<T>& m, const Permutation& perm) {
    require(perm.size() == m.rows(), "permutation length must match row count");
    Matrix<T> out(m.rows(), m.cols());
    for (std::size_t a = 0; a < m.rows(); ++a) {
        const auto src = m.row(a);
        std::copy(src.begin(), src.end(), out.row(perm.forward[a]).begin());
    }
    return out;
}

}  // namespace blockmask
