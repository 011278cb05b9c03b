# Skeleton for the "image classification" task.
import os, random, time, json

import numpy as np

# TODO: import the libraries this task needs (for example torchvision). Missing modules may be installed with `pip install <module>`.
from sklearn.metrics import accuracy_score, f1_score, mean_squared_log_error, rand_score

SEED = 42
random.seed(SEED)
np.random.seed(SEED)

DATASET_PATH = os.environ.get("AUTOML_DATASET_PATH", "_experiments/datasets")


def preprocess_data(dataset):
    # TODO: data preprocessing and feature engineering
    processed_data = dataset
    return processed_data


def train_model(model, train_loader, valid_loader):
    # TODO: training loop and hyperparameter optimization on the train and valid splits
    return model


def evaluate_model(model, test_loader):
    # TODO: define y_true and y_pred on the test split
    y_true, y_pred = [0, 1], [0, 1]
    performance_scores = {'ACC': accuracy_score(y_true, y_pred)}
    # TODO: measure complexity such as inference time and model size
    complexity_scores = {}
    return performance_scores, complexity_scores


def prepare_model_for_deployment(model):
    # TODO: compress or convert the evaluated model for the target platform
    deployable_model = model
    return deployable_model


def deploy_model(deployable_model):
    # TODO: deploy the model and return its URL endpoint
    url_endpoint = None
    return url_endpoint


def main():
    """
    Main function to execute the image classification pipeline.
    """
    # TODO: Step 1. load the dataset from DATASET_PATH or a public hub
    dataset = None
    # TODO: Step 2. split into train, valid and test (70/20/10)
    train_loader, valid_loader, test_loader = (None, None, None)
    # TODO: Step 3. preprocess
    processed_data = preprocess_data(dataset)
    # TODO: Step 4. define the model
    model = None
    # TODO: Step 5. train with hyperparameter optimization
    model = train_model(model, train_loader, valid_loader)
    model_performance, model_complexity = evaluate_model(model, test_loader)
    deployable_model = prepare_model_for_deployment(model)
    url_endpoint = deploy_model(deployable_model)
    return processed_data, model, deployable_model, url_endpoint, model_performance, model_complexity


if __name__ == "__main__":
    processed_data, model, deployable_model, url_endpoint, model_performance, model_complexity = main()
    print("Model Performance on Test Set:", model_performance)
    print("Model Complexity:", model_complexity)
    if url_endpoint:
        print("Deployment URL:", url_endpoint)
    print("AUTOML_RESULT " + json.dumps({"performance": model_performance, "complexity": model_complexity, "endpoint": url_endpoint}))
