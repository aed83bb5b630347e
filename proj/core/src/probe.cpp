#include "clicktok/errors.hpp"
#include "clicktok/eval.hpp"
#include "clicktok/rng.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace clicktok {

namespace {

struct mlp {
    Eigen::MatrixXd w1, w2; // hidden x in, classes x hidden
    Eigen::VectorXd b1, b2;

    static mlp init(int in, int hidden, int classes, rng & r) {
        mlp m;
        m.w1.resize(hidden, in);
        m.w2.resize(classes, hidden);
        const double s1 = std::sqrt(2.0 / in);
        const double s2 = std::sqrt(2.0 / hidden);
        for (int64_t i = 0; i < m.w1.size(); ++i) m.w1.data()[i] = s1 * r.normal();
        for (int64_t i = 0; i < m.w2.size(); ++i) m.w2.data()[i] = s2 * r.normal();
        m.b1 = Eigen::VectorXd::Zero(hidden);
        m.b2 = Eigen::VectorXd::Zero(classes);
        return m;
    }
};

struct adam_buf {
    Eigen::ArrayXd m, v;
};

void adam_step(Eigen::Map<Eigen::ArrayXd> p, const Eigen::ArrayXd & g, adam_buf & buf,
               double lr, int64_t t) {
    const double b1 = 0.9, b2 = 0.999;
    if (buf.m.size() == 0) {
        buf.m = Eigen::ArrayXd::Zero(p.size());
        buf.v = Eigen::ArrayXd::Zero(p.size());
    }
    buf.m = b1 * buf.m + (1.0 - b1) * g;
    buf.v = b2 * buf.v + (1.0 - b2) * g * g;
    const Eigen::ArrayXd mh = buf.m / (1.0 - std::pow(b1, (double) t));
    const Eigen::ArrayXd vh = buf.v / (1.0 - std::pow(b2, (double) t));
    p -= lr * mh / (vh.sqrt() + 1e-8);
}

double evaluate(const mlp & net, const std::vector<Eigen::VectorXd> & x,
                const std::vector<int> & y, const std::vector<int64_t> & idx) {
    if (idx.empty()) return 0.0;
    int64_t correct = 0;
    for (int64_t i : idx) {
        Eigen::VectorXd h = (net.w1 * x[i] + net.b1).cwiseMax(0.0);
        Eigen::VectorXd logits = net.w2 * h + net.b2;
        int pred = 0;
        logits.maxCoeff(&pred);
        correct += (pred == y[i]);
    }
    return (double) correct / idx.size();
}

} // namespace

probe_result train_probe(const std::vector<Eigen::VectorXd> & embeddings,
                         const std::vector<std::string> & labels, const probe_config & pc) {
    if (embeddings.size() != labels.size() || embeddings.empty()) {
        throw data_error("train_probe: embeddings/labels mismatch");
    }
    if (pc.split <= 0.0 || pc.split >= 1.0) throw config_error("train_probe: split must be in (0,1)");
    if (pc.seeds.empty()) throw config_error("train_probe: need at least one seed");

    // label ids and per-class index lists
    std::map<std::string, int> label_id;
    for (const auto & l : labels) label_id.emplace(l, 0);
    int next = 0;
    for (auto & [name, id] : label_id) id = next++;
    const int classes = next;
    if (classes < 2) throw data_error("train_probe: need >= 2 classes");

    std::vector<int> y(labels.size());
    std::vector<std::vector<int64_t>> by_class(classes);
    for (size_t i = 0; i < labels.size(); ++i) {
        y[i] = label_id[labels[i]];
        by_class[y[i]].push_back((int64_t) i);
    }
    int64_t max_count = 0;
    for (const auto & c : by_class) {
        if (c.size() < 2) throw data_error("train_probe: class with < 2 samples cannot stratify");
        max_count = std::max<int64_t>(max_count, (int64_t) c.size());
    }

    probe_result res;
    res.majority_baseline = (double) max_count / labels.size();

    const int in_dim = (int) embeddings[0].size();
    for (uint64_t seed : pc.seeds) {
        rng r(derive_seed(seed, "probe"));

        // stratified split; in validation mode, epoch selection uses a slice
        // carved off the training part
        std::vector<int64_t> train_idx, sel_idx, test_idx;
        for (auto cls : by_class) {
            r.shuffle(cls);
            const int64_t n_train = std::max<int64_t>(1, (int64_t) std::lround(pc.split * cls.size()));
            for (int64_t i = 0; i < (int64_t) cls.size(); ++i) {
                (i < n_train ? train_idx : test_idx).push_back(cls[i]);
            }
        }
        if (test_idx.empty()) throw data_error("train_probe: empty test split");
        if (!pc.select_on_test) {
            // last ~20% of each class's train part becomes the validation slice
            std::vector<int64_t> new_train;
            std::vector<std::vector<int64_t>> train_by_class(classes);
            for (int64_t i : train_idx) train_by_class[y[i]].push_back(i);
            for (auto & cls : train_by_class) {
                int64_t n_keep = std::max<int64_t>(1, (int64_t) std::lround(0.8 * cls.size()));
                if (n_keep == (int64_t) cls.size() && cls.size() > 1) n_keep -= 1;
                for (int64_t i = 0; i < (int64_t) cls.size(); ++i) {
                    (i < n_keep ? new_train : sel_idx).push_back(cls[i]);
                }
            }
            train_idx = std::move(new_train);
        }

        mlp net = mlp::init(in_dim, pc.hidden, classes, r);
        adam_buf bw1, bb1, bw2, bb2;
        int64_t step = 0;

        double best_sel = -1.0, best_test = 0.0;
        for (int epoch = 0; epoch < pc.epochs; ++epoch) {
            r.shuffle(train_idx);
            for (size_t start = 0; start < train_idx.size(); start += pc.batch) {
                const size_t end = std::min(train_idx.size(), start + pc.batch);
                Eigen::MatrixXd gw1 = Eigen::MatrixXd::Zero(net.w1.rows(), net.w1.cols());
                Eigen::MatrixXd gw2 = Eigen::MatrixXd::Zero(net.w2.rows(), net.w2.cols());
                Eigen::VectorXd gb1 = Eigen::VectorXd::Zero(net.b1.size());
                Eigen::VectorXd gb2 = Eigen::VectorXd::Zero(net.b2.size());

                const double scale = 1.0 / (double) (end - start);
                for (size_t bi = start; bi < end; ++bi) {
                    const int64_t i = train_idx[bi];
                    Eigen::VectorXd z = net.w1 * embeddings[i] + net.b1;
                    Eigen::VectorXd h = z.cwiseMax(0.0);
                    Eigen::VectorXd logits = net.w2 * h + net.b2;

                    const double m = logits.maxCoeff();
                    Eigen::VectorXd p = (logits.array() - m).exp();
                    p /= p.sum();
                    p[y[i]] -= 1.0;
                    p *= scale;

                    gw2.noalias() += p * h.transpose();
                    gb2 += p;
                    Eigen::VectorXd dh = net.w2.transpose() * p;
                    for (int64_t j = 0; j < dh.size(); ++j) {
                        if (z[j] <= 0.0) dh[j] = 0.0;
                    }
                    gw1.noalias() += dh * embeddings[i].transpose();
                    gb1 += dh;
                }

                ++step;
                adam_step(Eigen::Map<Eigen::ArrayXd>(net.w1.data(), net.w1.size()),
                          Eigen::Map<Eigen::ArrayXd>(gw1.data(), gw1.size()).eval(), bw1, pc.lr, step);
                adam_step(Eigen::Map<Eigen::ArrayXd>(net.b1.data(), net.b1.size()),
                          Eigen::Map<Eigen::ArrayXd>(gb1.data(), gb1.size()).eval(), bb1, pc.lr, step);
                adam_step(Eigen::Map<Eigen::ArrayXd>(net.w2.data(), net.w2.size()),
                          Eigen::Map<Eigen::ArrayXd>(gw2.data(), gw2.size()).eval(), bw2, pc.lr, step);
                adam_step(Eigen::Map<Eigen::ArrayXd>(net.b2.data(), net.b2.size()),
                          Eigen::Map<Eigen::ArrayXd>(gb2.data(), gb2.size()).eval(), bb2, pc.lr, step);
            }

            const double sel = pc.select_on_test ? evaluate(net, embeddings, y, test_idx)
                                                 : evaluate(net, embeddings, y, sel_idx);
            if (sel > best_sel) {
                best_sel = sel;
                best_test = evaluate(net, embeddings, y, test_idx);
            }
        }
        res.accuracy_per_seed.push_back(best_test);
    }

    double mean = 0.0;
    for (double a : res.accuracy_per_seed) mean += a;
    mean /= res.accuracy_per_seed.size();
    double var = 0.0;
    for (double a : res.accuracy_per_seed) var += (a - mean) * (a - mean);
    const size_t n = res.accuracy_per_seed.size();
    res.mean = mean;
    res.stderr_ = n > 1 ? std::sqrt(var / (n - 1)) / std::sqrt((double) n) : 0.0;
    return res;
}

} // namespace clicktok
